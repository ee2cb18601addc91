#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mdpcnn/errors.hpp"
#include "mdpcnn/tensor.hpp"

namespace mdpcnn {

// Central finite-difference verification of analytic gradients, run in
// double precision. `eval` recomputes the scalar objective at the current
// parameter values; `analytic` returns one gradient tensor per parameter,
// in the same order. Coordinates can be subsampled for large parameter
// sets (max_coords_per_tensor < 0 probes everything).
//
// Returns max over probed coordinates of
//   |analytic - central_diff| / max(1, |central_diff|).
inline double grad_check(const std::function<double()>& eval,
                         const std::function<std::vector<Tensor4d>()>& analytic,
                         const std::vector<Tensor4d*>& params,
                         double epsilon = 1e-5,
                         int max_coords_per_tensor = -1,
                         std::uint64_t coord_seed = 0) {
  if (params.empty()) throw UsageError("grad_check: no parameters");
  const std::vector<Tensor4d> grads = analytic();
  if (grads.size() != params.size()) {
    throw UsageError("grad_check: analytic returned " +
                     std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }

  std::mt19937_64 rng(coord_seed);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor4d& t = *params[p];
    if (!(grads[p].shape == t.shape)) {
      throw UsageError("grad_check: gradient shape " + grads[p].shape.str() +
                       " does not match parameter " + t.shape.str());
    }
    std::vector<std::size_t> coords;
    if (max_coords_per_tensor < 0 ||
        t.size() <= static_cast<std::size_t>(max_coords_per_tensor)) {
      coords.resize(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) coords[i] = i;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
      for (int i = 0; i < max_coords_per_tensor; ++i) coords.push_back(pick(rng));
    }
    for (std::size_t c : coords) {
      const double saved = t.data[c];
      t.data[c] = saved + epsilon;
      const double up = eval();
      t.data[c] = saved - epsilon;
      const double down = eval();
      t.data[c] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw DiagnosticError("grad_check: non-finite loss at probe point");
      }
      const double fd = (up - down) / (2.0 * epsilon);
      const double err = std::abs(grads[p].data[c] - fd) /
                         std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mdpcnn
