#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mdpcnn/errors.hpp"
#include "mdpcnn/tensor.hpp"

namespace mdpcnn {

// Weights of the discrimination objective. alpha scales the contrastive
// term, beta scales each chain's contrastive-center term.
struct LossConfig {
  double alpha = 0.99;
  double beta = 0.01;
  double margin = 1.0;
  double delta = 1.0;
  int num_classes = 0;

  void validate() const {
    if (alpha < 0 || beta < 0) {
      throw ConfigError("loss: alpha and beta must be >= 0");
    }
    if (margin <= 0) throw ConfigError("loss: margin must be > 0");
    if (delta <= 0) throw ConfigError("loss: delta must be > 0");
  }
};

// One learnable center row per class.
template <typename T>
struct CenterBank {
  Tensor4<T> centers;  // (num_classes, dim, 1, 1)

  CenterBank() = default;
  explicit CenterBank(Tensor4<T> c) : centers(std::move(c)) {}

  static CenterBank zeros(int num_classes, int dim) {
    return CenterBank(Tensor4<T>::zeros(num_classes, dim, 1, 1));
  }

  int num_classes() const { return centers.shape.n; }
  int dim() const { return centers.shape.k; }
};

template <typename T>
struct ContrastiveResult {
  T loss;
  Tensor4<T> grad_a;
  Tensor4<T> grad_b;
};

// L = 1/(2N) sum_i [ y_i * d_i + (1 - y_i) * max(m - d_i, 0) ],
// d_i = ||a_i - b_i||^2 (squared distance; no square root anywhere).
template <typename T>
ContrastiveResult<T> contrastive_loss(const Tensor4<T>& a, const Tensor4<T>& b,
                                      const std::vector<int>& pair_labels,
                                      T margin) {
  if (a.shape.n == 0) throw UsageError("contrastive_loss: empty batch");
  if (!(a.shape == b.shape) || a.shape.h != 1 || a.shape.w != 1) {
    throw UsageError("contrastive_loss: embedding shapes " + a.shape.str() +
                     " vs " + b.shape.str());
  }
  const int N = a.shape.n, D = a.shape.k;
  if (static_cast<int>(pair_labels.size()) != N) {
    throw UsageError("contrastive_loss: expected " + std::to_string(N) +
                     " pair labels, got " + std::to_string(pair_labels.size()));
  }
  if (!a.all_finite() || !b.all_finite()) {
    throw DiagnosticError("contrastive_loss: non-finite embedding");
  }

  ContrastiveResult<T> out{T(0), Tensor4<T>(a.shape), Tensor4<T>(b.shape)};
  T total = T(0);
  for (int i = 0; i < N; ++i) {
    const T* ai = a.data.data() + static_cast<std::size_t>(i) * D;
    const T* bi = b.data.data() + static_cast<std::size_t>(i) * D;
    T d = T(0);
    for (int j = 0; j < D; ++j) {
      const T diff = ai[j] - bi[j];
      d += diff * diff;
    }
    const int y = pair_labels[i];
    if (y != 0 && y != 1) {
      throw UsageError("contrastive_loss: pair label must be 0 or 1");
    }
    // dL/dd in units of the 1/(2N) prefactor.
    T dd;
    if (y == 1) {
      total += d;
      dd = T(1);
    } else {
      total += std::max(margin - d, T(0));
      dd = (d < margin) ? T(-1) : T(0);
    }
    const T coef = dd / T(N);  // (1/2N) * dd * dd/da with dd/da = 2(a-b)
    T* ga = out.grad_a.data.data() + static_cast<std::size_t>(i) * D;
    T* gb = out.grad_b.data.data() + static_cast<std::size_t>(i) * D;
    for (int j = 0; j < D; ++j) {
      const T g = coef * (ai[j] - bi[j]);
      ga[j] = g;
      gb[j] = -g;
    }
  }
  out.loss = total / (T(2) * T(N));
  return out;
}

template <typename T>
struct CenterLossResult {
  T loss;
  Tensor4<T> grad_x;
  Tensor4<T> grad_centers;
};

// L = 1/2 sum_i ||x_i - c_{y_i}||^2 / ( sum_{j != y_i} ||x_i - c_j||^2 + delta )
template <typename T>
CenterLossResult<T> contrastive_center_loss(const Tensor4<T>& x,
                                            const std::vector<int>& labels,
                                            const CenterBank<T>& bank,
                                            T delta) {
  const int n = x.shape.n, D = x.shape.k;
  const int k = bank.num_classes();
  if (n == 0) throw UsageError("contrastive_center_loss: empty batch");
  if (k <= 1) {
    throw ConfigError(
        "contrastive_center_loss: needs >= 2 classes, the denominator sum is "
        "empty with k = " + std::to_string(k));
  }
  if (bank.dim() != D) {
    throw UsageError("contrastive_center_loss: center dim " +
                     std::to_string(bank.dim()) + " vs embedding dim " +
                     std::to_string(D));
  }
  if (static_cast<int>(labels.size()) != n) {
    throw UsageError("contrastive_center_loss: label count mismatch");
  }
  if (!x.all_finite()) {
    throw DiagnosticError("contrastive_center_loss: non-finite embedding");
  }

  CenterLossResult<T> out{T(0), Tensor4<T>(x.shape),
                          Tensor4<T>(bank.centers.shape)};
  const Tensor4<T>& c = bank.centers;
  std::vector<T> diff(static_cast<std::size_t>(k) * D);
  for (int i = 0; i < n; ++i) {
    const int yi = labels[i];
    if (yi < 0 || yi >= k) {
      throw UsageError("contrastive_center_loss: label " + std::to_string(yi) +
                       " out of range for " + std::to_string(k) + " classes");
    }
    const T* xi = x.data.data() + static_cast<std::size_t>(i) * D;
    T numer = T(0), denom = delta;
    for (int j = 0; j < k; ++j) {
      const T* cj = c.data.data() + static_cast<std::size_t>(j) * D;
      T* dj = diff.data() + static_cast<std::size_t>(j) * D;
      T d2 = T(0);
      for (int e = 0; e < D; ++e) {
        dj[e] = xi[e] - cj[e];
        d2 += dj[e] * dj[e];
      }
      if (j == yi) {
        numer = d2;
      } else {
        denom += d2;
      }
    }
    out.loss += T(0.5) * numer / denom;

    // d/dx (1/2 * num/den) = (x - c_y)/den - (num/(2 den^2)) * 2 sum_{j!=y}(x - c_j)
    const T inv_den = T(1) / denom;
    const T ratio = numer * inv_den * inv_den;
    T* gx = out.grad_x.data.data() + static_cast<std::size_t>(i) * D;
    for (int j = 0; j < k; ++j) {
      const T* dj = diff.data() + static_cast<std::size_t>(j) * D;
      T* gc = out.grad_centers.data.data() + static_cast<std::size_t>(j) * D;
      if (j == yi) {
        for (int e = 0; e < D; ++e) {
          gx[e] += dj[e] * inv_den;
          gc[e] -= dj[e] * inv_den;
        }
      } else {
        for (int e = 0; e < D; ++e) {
          gx[e] -= ratio * dj[e];
          gc[e] += ratio * dj[e];
        }
      }
    }
  }
  return out;
}

template <typename T>
struct DiscriminationResult {
  T loss;
  T contrastive_part;        // unweighted L_const
  T center_part_a;           // unweighted L_cc of chain A
  T center_part_b;           // unweighted L_cc of chain B
  Tensor4<T> grad_a;
  Tensor4<T> grad_b;
  Tensor4<T> grad_centers;
};

// L = alpha * L_const + beta * (L_cc(A) + L_cc(B)); beta scales each chain's
// center loss separately. Gradients are composed as the same weighted sums,
// so the weighted-gradient identity holds exactly.
template <typename T>
DiscriminationResult<T> discrimination_loss(
    const Tensor4<T>& emb_a, const Tensor4<T>& emb_b,
    const std::vector<int>& labels_a, const std::vector<int>& labels_b,
    const std::vector<int>& pair_labels, const LossConfig& config,
    const CenterBank<T>& centers) {
  config.validate();
  const T alpha = static_cast<T>(config.alpha);
  const T beta = static_cast<T>(config.beta);

  ContrastiveResult<T> cl = contrastive_loss(
      emb_a, emb_b, pair_labels, static_cast<T>(config.margin));

  DiscriminationResult<T> out{T(0),
                              cl.loss,
                              T(0),
                              T(0),
                              Tensor4<T>(emb_a.shape),
                              Tensor4<T>(emb_b.shape),
                              Tensor4<T>(centers.centers.shape)};
  for (std::size_t i = 0; i < out.grad_a.size(); ++i) {
    out.grad_a.data[i] = alpha * cl.grad_a.data[i];
    out.grad_b.data[i] = alpha * cl.grad_b.data[i];
  }

  if (beta != T(0)) {
    const T delta = static_cast<T>(config.delta);
    CenterLossResult<T> ca =
        contrastive_center_loss(emb_a, labels_a, centers, delta);
    CenterLossResult<T> cb =
        contrastive_center_loss(emb_b, labels_b, centers, delta);
    out.center_part_a = ca.loss;
    out.center_part_b = cb.loss;
    for (std::size_t i = 0; i < out.grad_a.size(); ++i) {
      out.grad_a.data[i] += beta * ca.grad_x.data[i];
      out.grad_b.data[i] += beta * cb.grad_x.data[i];
    }
    for (std::size_t i = 0; i < out.grad_centers.size(); ++i) {
      out.grad_centers.data[i] =
          beta * (ca.grad_centers.data[i] + cb.grad_centers.data[i]);
    }
  }

  out.loss = alpha * cl.loss + beta * (out.center_part_a + out.center_part_b);
  return out;
}

}  // namespace mdpcnn
