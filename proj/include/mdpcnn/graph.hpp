#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mdpcnn/errors.hpp"
#include "mdpcnn/gemm.hpp"
#include "mdpcnn/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mdpcnn {

namespace detail {

// Unrolls one (K, H, W) image into a (K*kh*kw, OH*OW) patch block. The
// block can live inside a wider matrix (row stride ld) so a whole batch
// shares one matrix and the convolution becomes a single large product.
template <typename T>
void im2col(const T* im, int K, int H, int W, int kh, int kw, int stride,
            int pad, int OH, int OW, T* col, std::size_t ld) {
  for (int k = 0; k < K; ++k) {
    const T* plane = im + static_cast<std::size_t>(k) * H * W;
    for (int kr = 0; kr < kh; ++kr) {
      for (int kc = 0; kc < kw; ++kc) {
        T* row = col + (static_cast<std::size_t>(k) * kh * kw + kr * kw + kc) *
                           ld;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + kr;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < OW; ++ow) row[oh * OW + ow] = T(0);
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kc;
            row[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatters a patch-block gradient back onto the image, accumulating where
// patches overlap.
template <typename T>
void col2im_accum(const T* col, int K, int H, int W, int kh, int kw,
                  int stride, int pad, int OH, int OW, T* im,
                  std::size_t ld) {
  for (int k = 0; k < K; ++k) {
    T* plane = im + static_cast<std::size_t>(k) * H * W;
    for (int kr = 0; kr < kh; ++kr) {
      for (int kc = 0; kc < kw; ++kc) {
        const T* row = col + (static_cast<std::size_t>(k) * kh * kw + kr * kw +
                              kc) *
                                 ld;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + kr;
          if (ih < 0 || ih >= H) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kc;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * OW + ow];
          }
        }
      }
    }
  }
}

// Heap scratch without value-initialization; contents are always fully
// written before being read.
template <typename T>
std::shared_ptr<T[]> scratch(std::size_t count) {
  return std::shared_ptr<T[]>(new T[count]);
}

// Direct kernels for the 3x3 / stride-1 / pad-1 case: shifted row passes
// instead of patch matrices, which keeps every plane in cache.

template <typename T>
void conv3x3_forward_image(const T* in, int KI, int H, int W, const T* w,
                           const T* bias, int KO, T* out) {
  for (int ko = 0; ko < KO; ++ko) {
    T* o = out + static_cast<std::size_t>(ko) * H * W;
    const T bk = bias[ko];
    for (int i = 0; i < H * W; ++i) o[i] = bk;
    for (int ki = 0; ki < KI; ++ki) {
      const T* plane = in + static_cast<std::size_t>(ki) * H * W;
      const T* w9 = w + (static_cast<std::size_t>(ko) * KI + ki) * 9;
      for (int oh = 0; oh < H; ++oh) {
        T* orow = o + static_cast<std::size_t>(oh) * W;
        for (int kr = 0; kr < 3; ++kr) {
          const int ih = oh + kr - 1;
          if (ih < 0 || ih >= H) continue;
          const T* irow = plane + static_cast<std::size_t>(ih) * W;
          const T w0 = w9[kr * 3], w1 = w9[kr * 3 + 1], w2 = w9[kr * 3 + 2];
          orow[0] += w1 * irow[0] + w2 * irow[1];
          for (int ow = 1; ow < W - 1; ++ow) {
            orow[ow] += w0 * irow[ow - 1] + w1 * irow[ow] + w2 * irow[ow + 1];
          }
          orow[W - 1] += w0 * irow[W - 2] + w1 * irow[W - 1];
        }
      }
    }
  }
}

template <typename T>
void conv3x3_grad_input_image(const T* gout, int KO, int H, int W, const T* w,
                              int KI, T* gin) {
  for (int ki = 0; ki < KI; ++ki) {
    T* gi = gin + static_cast<std::size_t>(ki) * H * W;
    for (int ko = 0; ko < KO; ++ko) {
      const T* go = gout + static_cast<std::size_t>(ko) * H * W;
      const T* w9 = w + (static_cast<std::size_t>(ko) * KI + ki) * 9;
      for (int oh = 0; oh < H; ++oh) {
        const T* grow = go + static_cast<std::size_t>(oh) * W;
        for (int kr = 0; kr < 3; ++kr) {
          const int ih = oh + kr - 1;
          if (ih < 0 || ih >= H) continue;
          T* girow = gi + static_cast<std::size_t>(ih) * W;
          const T w0 = w9[kr * 3], w1 = w9[kr * 3 + 1], w2 = w9[kr * 3 + 2];
          girow[0] += w1 * grow[0] + w0 * grow[1];
          for (int iw = 1; iw < W - 1; ++iw) {
            girow[iw] +=
                w2 * grow[iw - 1] + w1 * grow[iw] + w0 * grow[iw + 1];
          }
          girow[W - 1] += w2 * grow[W - 2] + w1 * grow[W - 1];
        }
      }
    }
  }
}

template <typename T>
void conv3x3_grad_weights_image(const T* gout, int KO, const T* in, int KI,
                                int H, int W, T* gw) {
  for (int ko = 0; ko < KO; ++ko) {
    const T* go = gout + static_cast<std::size_t>(ko) * H * W;
    for (int ki = 0; ki < KI; ++ki) {
      const T* plane = in + static_cast<std::size_t>(ki) * H * W;
      T* w9 = gw + (static_cast<std::size_t>(ko) * KI + ki) * 9;
      for (int oh = 0; oh < H; ++oh) {
        const T* grow = go + static_cast<std::size_t>(oh) * W;
        for (int kr = 0; kr < 3; ++kr) {
          const int ih = oh + kr - 1;
          if (ih < 0 || ih >= H) continue;
          const T* irow = plane + static_cast<std::size_t>(ih) * W;
          T a0 = T(0), a1 = T(0), a2 = T(0);
          for (int ow = 1; ow < W - 1; ++ow) {
            a0 += grow[ow] * irow[ow - 1];
            a1 += grow[ow] * irow[ow];
            a2 += grow[ow] * irow[ow + 1];
          }
          a1 += grow[0] * irow[0];
          a2 += grow[0] * irow[1];
          a0 += grow[W - 1] * irow[W - 2];
          a1 += grow[W - 1] * irow[W - 1];
          w9[kr * 3] += a0;
          w9[kr * 3 + 1] += a1;
          w9[kr * 3 + 2] += a2;
        }
      }
    }
  }
}

}  // namespace detail

// Reverse-mode tape over dense rank-4 tensors. Ops record a closure; running
// the tape in reverse accumulates gradients additively into every variable
// created with requires_grad. A graph is single-owner and one-shot: after
// backward the tape is consumed.
//
// Per-sample work inside the heavy ops is parallelized with OpenMP. Each
// sample's outputs (and gradient slices) are written by exactly one thread
// and cross-sample reductions run serially in sample order, so results do
// not depend on the thread count.
template <typename T>
class Graph {
 public:
  using Var = int;

  // --- variable creation ----------------------------------------------

  Var input(Tensor4<T> v) { return add_var(std::move(v), false); }
  Var param(Tensor4<T> v) { return add_var(std::move(v), true); }

  const Tensor4<T>& value(Var v) const { return values_.at(v); }

  // Valid after backward; zero for variables no gradient reached.
  const Tensor4<T>& grad(Var v) const {
    if (!ran_backward_) {
      throw UsageError("gradients are only available after backward()");
    }
    Tensor4<T>& g = grads_.at(v);
    if (!(g.shape == values_.at(v).shape)) {
      g = Tensor4<T>(values_.at(v).shape);  // untouched: all zeros
    }
    return g;
  }

  bool requires_grad(Var v) const { return requires_grad_.at(v) != 0; }
  std::size_t num_vars() const { return values_.size(); }

  // --- ops --------------------------------------------------------------

  // Cross-correlation with kernel bank (KO, KI, kh, kw) and per-output-
  // channel bias (KO, 1, 1, 1).
  Var conv2d(Var in, Var weights, Var bias, int stride, int pad) {
    const Tensor4<T>& x = value(in);
    const Tensor4<T>& w = value(weights);
    const Tensor4<T>& b = value(bias);
    if (stride < 1 || pad < 0) {
      throw ConfigError("conv2d: stride must be >= 1 and pad >= 0");
    }
    if (x.shape.k != w.shape.k) {
      throw ConfigError("conv2d: input channels " + x.shape.str() +
                        " do not match kernel bank " + w.shape.str());
    }
    if (b.shape.n != w.shape.n || b.shape.count() != std::size_t(w.shape.n)) {
      throw ConfigError("conv2d: bias shape " + b.shape.str() +
                        " does not match " + std::to_string(w.shape.n) +
                        " output channels");
    }
    const int N = x.shape.n, KI = x.shape.k, H = x.shape.h, W = x.shape.w;
    const int KO = w.shape.n, kh = w.shape.h, kw = w.shape.w;
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    if (H + 2 * pad < kh || W + 2 * pad < kw || OH < 1 || OW < 1) {
      throw ConfigError("conv2d: kernel " + w.shape.str() +
                        " does not fit input " + x.shape.str() + " with pad " +
                        std::to_string(pad));
    }

    if (kh == 3 && kw == 3 && stride == 1 && pad == 1) {
      return conv2d_direct3x3(in, weights, bias, N, KI, H, W, KO);
    }

    const int crows = KI * kh * kw;
    const int ccols = OH * OW;
    // One patch matrix for the whole batch: (crows x N*ccols), sample n in
    // columns [n*ccols, (n+1)*ccols). Kept alive for the weight-grad pass.
    const std::size_t wide = static_cast<std::size_t>(N) * ccols;
    const bool par_ = N >= 2 && static_cast<std::size_t>(crows) * wide >= 32768;
    auto cols = detail::scratch<T>(static_cast<std::size_t>(crows) * wide);

#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
    for (int n = 0; n < N; ++n) {
      detail::im2col(x.sample(n), KI, H, W, kh, kw, stride, pad, OH, OW,
                     cols.get() + static_cast<std::size_t>(n) * ccols, wide);
    }

    // Channel-major product, then interleave back to (N, KO, OH, OW).
    auto chan = detail::scratch<T>(static_cast<std::size_t>(KO) * wide);
    gemm_nn(KO, static_cast<int>(wide), crows, w.data.data(), crows,
            cols.get(), wide, chan.get(), static_cast<int>(wide));
    Tensor4<T> out(Shape4{N, KO, OH, OW});
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
    for (int n = 0; n < N; ++n) {
      for (int ko = 0; ko < KO; ++ko) {
        const T* src = chan.get() + static_cast<std::size_t>(ko) * wide +
                       static_cast<std::size_t>(n) * ccols;
        T* dst = out.plane(n, ko);
        const T bk = b.data[ko];
        for (int i = 0; i < ccols; ++i) dst[i] = src[i] + bk;
      }
    }

    Var out_v = add_var(std::move(out),
                        requires_grad(in) || requires_grad(weights) ||
                            requires_grad(bias));
    record([this, in, weights, bias, out_v, cols, N, KI, H, W, KO, kh, kw,
            stride, pad, OH, OW, crows, ccols, wide, par_] {
      const Tensor4<T>& gout = grads_[out_v];
      const Tensor4<T>& w = values_[weights];

      // Gather the output gradient into the channel-major layout once.
      auto gchan = detail::scratch<T>(static_cast<std::size_t>(KO) * wide);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
      for (int n = 0; n < N; ++n) {
        for (int ko = 0; ko < KO; ++ko) {
          const T* src = gout.plane(n, ko);
          T* dst = gchan.get() + static_cast<std::size_t>(ko) * wide +
                   static_cast<std::size_t>(n) * ccols;
          for (int i = 0; i < ccols; ++i) dst[i] = src[i];
        }
      }

      if (requires_grad(weights)) {
        gemm_nt(KO, crows, static_cast<int>(wide), gchan.get(), wide,
                cols.get(), wide, grads_[weights].data.data(), crows,
                /*accumulate=*/true);
      }
      if (requires_grad(bias)) {
        Tensor4<T>& gb = grads_[bias];
        for (int ko = 0; ko < KO; ++ko) {
          const T* row = gchan.get() + static_cast<std::size_t>(ko) * wide;
          T acc = T(0);
          for (std::size_t i = 0; i < wide; ++i) acc += row[i];
          gb.data[ko] += acc;
        }
      }
      if (requires_grad(in)) {
        auto gcol = detail::scratch<T>(static_cast<std::size_t>(crows) * wide);
        gemm_tn(crows, static_cast<int>(wide), KO, w.data.data(), crows,
                gchan.get(), wide, gcol.get(), static_cast<int>(wide));
        Tensor4<T>& gin = grads_[in];
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
        for (int n = 0; n < N; ++n) {
          detail::col2im_accum(
              gcol.get() + static_cast<std::size_t>(n) * ccols, KI, H, W, kh,
              kw, stride, pad, OH, OW, gin.sample(n), wide);
        }
      }
    });
    return out_v;
  }

  Var relu(Var in) {
    const Tensor4<T>& x = value(in);
    Tensor4<T> out(x.shape);
    const std::int64_t count = static_cast<std::int64_t>(x.size());
    const bool par_ = count >= 262144;
    for (std::int64_t i = 0; i < count; ++i) {
      out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    }
    Var out_v = add_var(std::move(out), requires_grad(in));
    record([this, in, out_v, count, par_] {
      if (!requires_grad(in)) return;
      const Tensor4<T>& x = values_[in];
      const Tensor4<T>& gout = grads_[out_v];
      Tensor4<T>& gin = grads_[in];
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
      for (std::int64_t i = 0; i < count; ++i) {
        if (x.data[i] > T(0)) gin.data[i] += gout.data[i];
      }
    });
    return out_v;
  }

  // Per-window maximum; gradient routes to the argmax position, ties going
  // to the lowest linear index in the window scan.
  Var maxpool2d(Var in, int window, int stride) {
    const Tensor4<T>& x = value(in);
    if (window < 1 || stride < 1) {
      throw ConfigError("maxpool2d: window and stride must be >= 1");
    }
    if (x.shape.h < window || x.shape.w < window) {
      throw ConfigError("maxpool2d: window " + std::to_string(window) +
                        " exceeds spatial dims of " + x.shape.str());
    }
    const int N = x.shape.n, K = x.shape.k, H = x.shape.h, W = x.shape.w;
    const int OH = (H - window) / stride + 1;
    const int OW = (W - window) / stride + 1;
    Tensor4<T> out(Shape4{N, K, OH, OW});
    const bool par_ = N >= 2 && out.size() >= 16384;
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());

#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < K; ++k) {
        const T* plane = x.plane(n, k);
        T* oplane = out.plane(n, k);
        std::int32_t* aplane =
            argmax->data() +
            (static_cast<std::size_t>(n) * K + k) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            const int h0 = oh * stride, w0 = ow * stride;
            T best = plane[h0 * W + w0];
            std::int32_t best_at = h0 * W + w0;
            for (int r = 0; r < window; ++r) {
              for (int c = 0; c < window; ++c) {
                const std::int32_t idx = (h0 + r) * W + (w0 + c);
                if (plane[idx] > best) {
                  best = plane[idx];
                  best_at = idx;
                }
              }
            }
            oplane[oh * OW + ow] = best;
            aplane[oh * OW + ow] = best_at;
          }
        }
      }
    }

    Var out_v = add_var(std::move(out), requires_grad(in));
    record([this, in, out_v, argmax, N, K, OH, OW, par_] {
      if (!requires_grad(in)) return;
      const Tensor4<T>& gout = grads_[out_v];
      Tensor4<T>& gin = grads_[in];
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
      for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
          const T* gplane = gout.plane(n, k);
          T* iplane = gin.plane(n, k);
          const std::int32_t* aplane =
              argmax->data() +
              (static_cast<std::size_t>(n) * K + k) * OH * OW;
          for (int i = 0; i < OH * OW; ++i) iplane[aplane[i]] += gplane[i];
        }
      }
    });
    return out_v;
  }

  // Affine map of a flattened vector batch (N, D, 1, 1) by weights
  // (O, D, 1, 1) and bias (O, 1, 1, 1).
  Var fully_connected(Var in, Var weights, Var bias) {
    const Tensor4<T>& x = value(in);
    const Tensor4<T>& w = value(weights);
    const Tensor4<T>& b = value(bias);
    if (x.shape.h != 1 || x.shape.w != 1) {
      throw ConfigError("fully_connected: input must be flattened, got " +
                        x.shape.str());
    }
    if (x.shape.k != w.shape.k) {
      throw ConfigError("fully_connected: input width " +
                        std::to_string(x.shape.k) +
                        " does not match weight input dim " +
                        std::to_string(w.shape.k));
    }
    if (b.shape.n != w.shape.n) {
      throw ConfigError("fully_connected: bias length " +
                        std::to_string(b.shape.n) + " does not match " +
                        std::to_string(w.shape.n) + " outputs");
    }
    const int N = x.shape.n, D = x.shape.k, O = w.shape.n;
    Tensor4<T> out(Shape4{N, O, 1, 1});
    gemm_nt(N, O, D, x.data.data(), D, w.data.data(), D, out.data.data(), O);
    for (int n = 0; n < N; ++n) {
      T* row = out.data.data() + static_cast<std::size_t>(n) * O;
      for (int o = 0; o < O; ++o) row[o] += b.data[o];
    }
    Var out_v = add_var(std::move(out),
                        requires_grad(in) || requires_grad(weights) ||
                            requires_grad(bias));
    record([this, in, weights, bias, out_v, N, D, O] {
      const Tensor4<T>& gout = grads_[out_v];
      if (requires_grad(in)) {
        gemm_nn(N, D, O, gout.data.data(), O, values_[weights].data.data(), D,
                grads_[in].data.data(), D, /*accumulate=*/true);
      }
      if (requires_grad(weights)) {
        gemm_tn(O, D, N, gout.data.data(), O, values_[in].data.data(), D,
                grads_[weights].data.data(), D, /*accumulate=*/true);
      }
      if (requires_grad(bias)) {
        Tensor4<T>& gb = grads_[bias];
        for (int n = 0; n < N; ++n) {
          const T* row = gout.data.data() + static_cast<std::size_t>(n) * O;
          for (int o = 0; o < O; ++o) gb.data[o] += row[o];
        }
      }
    });
    return out_v;
  }

  // (N, K, H, W) -> (N, K*H*W, 1, 1); same storage order.
  Var flatten(Var in) {
    const Tensor4<T>& x = value(in);
    const Shape4 to{x.shape.n, x.shape.k * x.shape.h * x.shape.w, 1, 1};
    Tensor4<T> out(to, x.data);
    Var out_v = add_var(std::move(out), requires_grad(in));
    record([this, in, out_v] {
      if (!requires_grad(in)) return;
      const Tensor4<T>& gout = grads_[out_v];
      Tensor4<T>& gin = grads_[in];
      for (std::size_t i = 0; i < gin.size(); ++i) gin.data[i] += gout.data[i];
    });
    return out_v;
  }

  // Splits along N into parts of the given sizes; parts must sum to N.
  std::vector<Var> slice_batch(Var in, const std::vector<int>& parts) {
    const Tensor4<T>& x = value(in);
    int total = 0;
    for (int p : parts) {
      if (p < 1) throw ConfigError("slice_batch: part sizes must be >= 1");
      total += p;
    }
    if (total != x.shape.n) {
      throw ConfigError("slice_batch: parts sum to " + std::to_string(total) +
                        " but input has N = " + std::to_string(x.shape.n));
    }
    const bool rg = requires_grad(in);
    std::vector<Var> outs;
    outs.reserve(parts.size());
    int offset = 0;
    for (int p : parts) {
      Tensor4<T> piece(Shape4{p, x.shape.k, x.shape.h, x.shape.w});
      std::copy_n(x.sample(offset), piece.size(), piece.data.data());
      outs.push_back(add_var(std::move(piece), rg));
      offset += p;
    }
    record([this, in, outs, parts] {
      if (!requires_grad(in)) return;
      Tensor4<T>& gin = grads_[in];
      int offset = 0;
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const Tensor4<T>& gpart = grads_[outs[i]];
        T* dst = gin.sample(offset);
        for (std::size_t j = 0; j < gpart.size(); ++j) dst[j] += gpart.data[j];
        offset += parts[i];
      }
    });
    return outs;
  }

  // Concatenates along N; all parts must agree on (K, H, W).
  Var concat_batch(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_batch: empty part list");
    const Shape4 first = value(parts[0]).shape;
    int total = 0;
    bool rg = false;
    for (Var p : parts) {
      const Shape4 s = value(p).shape;
      if (s.k != first.k || s.h != first.h || s.w != first.w) {
        throw ConfigError("concat_batch: part shape " + s.str() +
                          " does not match " + first.str());
      }
      total += s.n;
      rg = rg || requires_grad(p);
    }
    Tensor4<T> out(Shape4{total, first.k, first.h, first.w});
    int offset = 0;
    for (Var p : parts) {
      const Tensor4<T>& piece = value(p);
      std::copy_n(piece.data.data(), piece.size(), out.sample(offset));
      offset += piece.shape.n;
    }
    Var out_v = add_var(std::move(out), rg);
    record([this, parts, out_v] {
      const Tensor4<T>& gout = grads_[out_v];
      int offset = 0;
      for (Var p : parts) {
        const int pn = values_[p].shape.n;
        if (requires_grad(p)) {
          Tensor4<T>& gp = grads_[p];
          const T* src = gout.sample(offset);
          for (std::size_t j = 0; j < gp.size(); ++j) gp.data[j] += src[j];
        }
        offset += pn;
      }
    });
    return out_v;
  }

  // Elementwise maximum across V single-sample feature maps; gradient routes
  // to the argmax view, ties to the lowest view index.
  Var view_pool(const std::vector<Var>& views) {
    if (views.empty()) throw ConfigError("view_pool: empty view list");
    const Shape4 s = value(views[0]).shape;
    for (Var v : views) {
      if (value(v).shape.n != 1) {
        throw ConfigError("view_pool: every view must have N = 1, got " +
                          value(v).shape.str());
      }
      if (!(value(v).shape == s)) {
        throw ConfigError("view_pool: view shape " + value(v).shape.str() +
                          " does not match " + s.str());
      }
    }
    Tensor4<T> out = value(views[0]);
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size(), 0);
    for (std::size_t vi = 1; vi < views.size(); ++vi) {
      const Tensor4<T>& x = value(views[vi]);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (x.data[i] > out.data[i]) {
          out.data[i] = x.data[i];
          (*argmax)[i] = static_cast<std::int32_t>(vi);
        }
      }
    }
    bool rg = false;
    for (Var v : views) rg = rg || requires_grad(v);
    Var out_v = add_var(std::move(out), rg);
    record([this, views, out_v, argmax] {
      const Tensor4<T>& gout = grads_[out_v];
      for (std::size_t i = 0; i < gout.size(); ++i) {
        const Var src = views[(*argmax)[i]];
        if (requires_grad(src)) grads_[src].data[i] += gout.data[i];
      }
    });
    return out_v;
  }

  // Reduction to a scalar (1, 1, 1, 1).
  Var sum(Var in) {
    const Tensor4<T>& x = value(in);
    T acc = T(0);
    for (const T& v : x.data) acc += v;
    Var out_v = add_var(Tensor4<T>::scalar(acc), requires_grad(in));
    record([this, in, out_v] {
      if (!requires_grad(in)) return;
      const T g = grads_[out_v].data[0];
      Tensor4<T>& gin = grads_[in];
      for (T& v : gin.data) v += g;
    });
    return out_v;
  }

  Var square(Var in) {
    const Tensor4<T>& x = value(in);
    Tensor4<T> out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * x.data[i];
    Var out_v = add_var(std::move(out), requires_grad(in));
    record([this, in, out_v] {
      if (!requires_grad(in)) return;
      const Tensor4<T>& x = values_[in];
      const Tensor4<T>& gout = grads_[out_v];
      Tensor4<T>& gin = grads_[in];
      for (std::size_t i = 0; i < x.size(); ++i) {
        gin.data[i] += T(2) * x.data[i] * gout.data[i];
      }
    });
    return out_v;
  }

  Var scale(Var in, T c) {
    const Tensor4<T>& x = value(in);
    Tensor4<T> out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = c * x.data[i];
    Var out_v = add_var(std::move(out), requires_grad(in));
    record([this, in, out_v, c] {
      if (!requires_grad(in)) return;
      const Tensor4<T>& gout = grads_[out_v];
      Tensor4<T>& gin = grads_[in];
      for (std::size_t i = 0; i < gin.size(); ++i) gin.data[i] += c * gout.data[i];
    });
    return out_v;
  }

  // --- backward ---------------------------------------------------------

  // Seeds a scalar loss with gradient 1 and consumes the tape.
  void backward(Var loss) {
    const Shape4 s = value(loss).shape;
    if (s.count() != 1) {
      throw UsageError("backward: root must be scalar, got " + s.str());
    }
    std::vector<std::pair<Var, Tensor4<T>>> seeds;
    seeds.emplace_back(loss, Tensor4<T>::scalar(T(1)));
    backward_seeded(seeds);
  }

  // Seeds externally computed gradients (e.g. from a loss evaluated outside
  // the graph) into one or more variables, then replays the tape.
  void backward_seeded(const std::vector<std::pair<Var, Tensor4<T>>>& seeds) {
    if (consumed_) throw UsageError("backward: tape already consumed");
    if (seeds.empty()) throw UsageError("backward: no seed gradients");
    // Zero buffers only where gradients can flow; the rest stay empty and
    // materialize lazily if queried.
    grads_.assign(values_.size(), Tensor4<T>());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (requires_grad_[i]) grads_[i] = Tensor4<T>(values_[i].shape);
    }
    for (const auto& [v, g] : seeds) {
      if (!(g.shape == values_.at(v).shape)) {
        throw UsageError("backward: seed gradient shape " + g.shape.str() +
                         " does not match variable " +
                         values_.at(v).shape.str());
      }
      for (std::size_t i = 0; i < g.size(); ++i) {
        grads_[v].data[i] += g.data[i];
      }
    }
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    consumed_ = true;
    ran_backward_ = true;
  }

 private:
  // Shifted-row kernels; one worker per sample, weight-gradient partials
  // reduced in sample order.
  Var conv2d_direct3x3(Var in, Var weights, Var bias, int N, int KI, int H,
                       int W, int KO) {
    const Tensor4<T>& x = value(in);
    const Tensor4<T>& w = value(weights);
    const Tensor4<T>& b = value(bias);
    Tensor4<T> out(Shape4{N, KO, H, W});
    const bool par_ =
        N >= 2 &&
        static_cast<long long>(N) * KO * KI * H * W >= 1 << 15;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
    for (int n = 0; n < N; ++n) {
      detail::conv3x3_forward_image(x.sample(n), KI, H, W, w.data.data(),
                                    b.data.data(), KO, out.sample(n));
    }
    Var out_v = add_var(std::move(out),
                        requires_grad(in) || requires_grad(weights) ||
                            requires_grad(bias));
    record([this, in, weights, bias, out_v, N, KI, H, W, KO, par_] {
      const Tensor4<T>& gout = grads_[out_v];
      const Tensor4<T>& w = values_[weights];
      const Tensor4<T>& x = values_[in];
      if (requires_grad(weights)) {
        const std::size_t wsize = w.size();
        std::vector<T> partial(static_cast<std::size_t>(N) * wsize, T(0));
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
        for (int n = 0; n < N; ++n) {
          detail::conv3x3_grad_weights_image(
              gout.sample(n), KO, x.sample(n), KI, H, W,
              partial.data() + static_cast<std::size_t>(n) * wsize);
        }
        Tensor4<T>& gw = grads_[weights];
        for (int n = 0; n < N; ++n) {
          const T* p = partial.data() + static_cast<std::size_t>(n) * wsize;
          for (std::size_t i = 0; i < wsize; ++i) gw.data[i] += p[i];
        }
      }
      if (requires_grad(bias)) {
        Tensor4<T>& gb = grads_[bias];
        for (int n = 0; n < N; ++n) {
          for (int ko = 0; ko < KO; ++ko) {
            const T* plane = gout.plane(n, ko);
            T acc = T(0);
            for (int i = 0; i < H * W; ++i) acc += plane[i];
            gb.data[ko] += acc;
          }
        }
      }
      if (requires_grad(in)) {
        Tensor4<T>& gin = grads_[in];
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par_)
#endif
        for (int n = 0; n < N; ++n) {
          detail::conv3x3_grad_input_image(gout.sample(n), KO, H, W,
                                           w.data.data(), KI, gin.sample(n));
        }
      }
    });
    return out_v;
  }

  Var add_var(Tensor4<T> v, bool rg) {
    if (consumed_) {
      throw UsageError("graph: cannot add ops to a consumed tape");
    }
    values_.push_back(std::move(v));
    requires_grad_.push_back(rg ? 1 : 0);
    return static_cast<Var>(values_.size() - 1);
  }

  void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  // Deque keeps value() references stable while ops append new variables.
  std::deque<Tensor4<T>> values_;
  mutable std::vector<Tensor4<T>> grads_;
  std::vector<char> requires_grad_;
  std::vector<std::function<void()>> tape_;
  bool consumed_ = false;
  bool ran_backward_ = false;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace mdpcnn
