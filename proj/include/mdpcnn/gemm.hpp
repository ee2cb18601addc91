#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mdpcnn {

// Row-major matrix kernels for the conv/fc layers. Threading splits the
// output into disjoint column strips (or rows for the dot-product form), so
// every C element is written by exactly one thread with a fixed accumulation
// order: results are bit-identical for any thread count.

inline constexpr int kGemmStrip = 256;

// C (MxN) = A (MxK) * B (KxN), += when accumulate is set.
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
             T* C, int ldc, bool accumulate = false) {
  const int strips = (N + kGemmStrip - 1) / kGemmStrip;
  const bool parallel_worthwhile =
      strips > 1 && static_cast<long long>(M) * N * K >= 1 << 18;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel_worthwhile)
#endif
  for (int s = 0; s < strips; ++s) {
    const int j0 = s * kGemmStrip;
    const int jn = (N - j0) < kGemmStrip ? (N - j0) : kGemmStrip;
    for (int i = 0; i < M; ++i) {
      T* c = C + static_cast<std::size_t>(i) * ldc + j0;
      if (!accumulate) {
        for (int j = 0; j < jn; ++j) c[j] = T(0);
      }
      const T* a = A + static_cast<std::size_t>(i) * lda;
      for (int k = 0; k < K; ++k) {
        const T ak = a[k];
        const T* b = B + static_cast<std::size_t>(k) * ldb + j0;
        for (int j = 0; j < jn; ++j) c[j] += ak * b[j];
      }
    }
  }
}

// C (MxN) = A^T * B where A is (KxM).
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
             T* C, int ldc, bool accumulate = false) {
  const int strips = (N + kGemmStrip - 1) / kGemmStrip;
  const bool parallel_worthwhile =
      strips > 1 && static_cast<long long>(M) * N * K >= 1 << 18;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel_worthwhile)
#endif
  for (int s = 0; s < strips; ++s) {
    const int j0 = s * kGemmStrip;
    const int jn = (N - j0) < kGemmStrip ? (N - j0) : kGemmStrip;
    if (!accumulate) {
      for (int i = 0; i < M; ++i) {
        T* c = C + static_cast<std::size_t>(i) * ldc + j0;
        for (int j = 0; j < jn; ++j) c[j] = T(0);
      }
    }
    for (int k = 0; k < K; ++k) {
      const T* a = A + static_cast<std::size_t>(k) * lda;
      const T* b = B + static_cast<std::size_t>(k) * ldb + j0;
      for (int i = 0; i < M; ++i) {
        const T ai = a[i];
        T* c = C + static_cast<std::size_t>(i) * ldc + j0;
        for (int j = 0; j < jn; ++j) c[j] += ai * b[j];
      }
    }
  }
}

// C (MxN) = A * B^T where B is (NxK); each element is one long dot product.
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
             T* C, int ldc, bool accumulate = false) {
  const bool parallel_worthwhile =
      M > 1 && static_cast<long long>(M) * N * K >= 1 << 18;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel_worthwhile)
#endif
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<std::size_t>(i) * lda;
    T* c = C + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<std::size_t>(j) * ldb;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] = accumulate ? c[j] + acc : acc;
    }
  }
}

}  // namespace mdpcnn
