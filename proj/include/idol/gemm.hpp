#pragma once

#include <cstdint>

#include "idol/threading.hpp"

namespace idol {

// Row-major GEMM kernels tuned for the shapes this codebase produces
// (im2col products, channel-major token projections, attention score/value
// products). Accumulation over k always runs in index order, so results are
// bit-identical regardless of the worker count; parallelism is only over
// independent output column panels.

namespace gemm_detail {

// One N-panel of C[M,N] (+)= A[M,K] * B[K,N]. K is blocked so the active
// B panel stays cache-resident while four C rows are carried in registers/L1.
template <typename T>
inline void panel_nn(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda, const T* B,
                     int64_t ldb, T* C, int64_t ldc, bool accumulate) {
  constexpr int64_t KB = 256;
  if (!accumulate) {
    for (int64_t i = 0; i < M; ++i) {
      T* c = C + i * ldc;
      for (int64_t j = 0; j < N; ++j) c[j] = T(0);
    }
  }
  for (int64_t k0 = 0; k0 < K; k0 += KB) {
    const int64_t k1 = k0 + KB < K ? k0 + KB : K;
    int64_t i = 0;
    for (; i + 4 <= M; i += 4) {
      const T* a0 = A + i * lda;
      const T* a1 = a0 + lda;
      const T* a2 = a1 + lda;
      const T* a3 = a2 + lda;
      T* c0 = C + i * ldc;
      T* c1 = c0 + ldc;
      T* c2 = c1 + ldc;
      T* c3 = c2 + ldc;
      int64_t k = k0;
      for (; k + 2 <= k1; k += 2) {
        const T* b0 = B + k * ldb;
        const T* b1 = b0 + ldb;
        const T w00 = a0[k], w01 = a0[k + 1];
        const T w10 = a1[k], w11 = a1[k + 1];
        const T w20 = a2[k], w21 = a2[k + 1];
        const T w30 = a3[k], w31 = a3[k + 1];
        for (int64_t j = 0; j < N; ++j) {
          const T bj0 = b0[j], bj1 = b1[j];
          c0[j] += w00 * bj0 + w01 * bj1;
          c1[j] += w10 * bj0 + w11 * bj1;
          c2[j] += w20 * bj0 + w21 * bj1;
          c3[j] += w30 * bj0 + w31 * bj1;
        }
      }
      for (; k < k1; ++k) {
        const T* b0 = B + k * ldb;
        const T w0 = a0[k], w1 = a1[k], w2 = a2[k], w3 = a3[k];
        for (int64_t j = 0; j < N; ++j) {
          const T bj = b0[j];
          c0[j] += w0 * bj;
          c1[j] += w1 * bj;
          c2[j] += w2 * bj;
          c3[j] += w3 * bj;
        }
      }
    }
    for (; i < M; ++i) {
      const T* a = A + i * lda;
      T* c = C + i * ldc;
      for (int64_t k = k0; k < k1; ++k) {
        const T ak = a[k];
        const T* b = B + k * ldb;
        for (int64_t j = 0; j < N; ++j) c[j] += ak * b[j];
      }
    }
  }
}

}  // namespace gemm_detail

// C[M,N] = A[M,K] * B[K,N], or += when accumulate is true.
template <typename T>
inline void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda, const T* B,
                    int64_t ldb, T* C, int64_t ldc, bool accumulate = false) {
  constexpr int64_t NB = 1024;
  const int64_t panels = (N + NB - 1) / NB;
  if (panels <= 1 || M * K < 4096) {
    gemm_detail::panel_nn(M, N, K, A, lda, B, ldb, C, ldc, accumulate);
    return;
  }
  parallel_for(panels, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      const int64_t j0 = p * NB;
      const int64_t j1 = j0 + NB < N ? j0 + NB : N;
      gemm_detail::panel_nn(M, j1 - j0, K, A, lda, B + j0, ldb, C + j0, ldc, accumulate);
    }
  });
}

// C[M,N] += A[M,K] * B[N,K]^T (row dot products). Used for weight gradients
// where both operands are wide along k.
template <typename T>
inline void gemm_nt_acc(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda, const T* B,
                        int64_t ldb, T* C, int64_t ldc) {
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * lda;
    T* c = C + i * ldc;
    int64_t j = 0;
    for (; j + 2 <= N; j += 2) {
      const T* b0 = B + j * ldb;
      const T* b1 = b0 + ldb;
      T s00 = T(0), s01 = T(0), s10 = T(0), s11 = T(0);
      int64_t k = 0;
      for (; k + 2 <= K; k += 2) {
        s00 += a[k] * b0[k];
        s01 += a[k + 1] * b0[k + 1];
        s10 += a[k] * b1[k];
        s11 += a[k + 1] * b1[k + 1];
      }
      if (k < K) {
        s00 += a[k] * b0[k];
        s10 += a[k] * b1[k];
      }
      c[j] += s00 + s01;
      c[j + 1] += s10 + s11;
    }
    for (; j < N; ++j) {
      const T* b = B + j * ldb;
      T s0 = T(0), s1 = T(0);
      int64_t k = 0;
      for (; k + 2 <= K; k += 2) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
      }
      if (k < K) s0 += a[k] * b[k];
      c[j] += s0 + s1;
    }
  }
}

// dst[C,R] = src[R,C]^T, cache-blocked.
template <typename T>
inline void pack_transpose(const T* src, int64_t R, int64_t C, int64_t ld_src, T* dst,
                           int64_t ld_dst) {
  constexpr int64_t TB = 32;
  for (int64_t r0 = 0; r0 < R; r0 += TB) {
    const int64_t r1 = r0 + TB < R ? r0 + TB : R;
    for (int64_t c0 = 0; c0 < C; c0 += TB) {
      const int64_t c1 = c0 + TB < C ? c0 + TB : C;
      for (int64_t r = r0; r < r1; ++r) {
        const T* s = src + r * ld_src;
        for (int64_t c = c0; c < c1; ++c) dst[c * ld_dst + r] = s[c];
      }
    }
  }
}

template <typename T>
inline void axpy(int64_t n, T alpha, const T* x, T* y) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace idol
