#pragma once

namespace tma {

// Small single-threaded GEMM kernels, row-major. Loop orders are chosen so
// the inner loops auto-vectorize. Accumulation order is fixed, so results
// are bit-stable run to run.

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<long long>(i) * K;
    T* c = C + static_cast<long long>(i) * N;
    for (int k = 0; k < K; ++k) {
      const T aik = a[k];
      if (aik == T(0)) continue;
      const T* b = B + static_cast<long long>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<long long>(i) * K;
    T* c = C + static_cast<long long>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<long long>(j) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int k = 0; k < K; ++k) {
    const T* a = A + static_cast<long long>(k) * M;
    const T* b = B + static_cast<long long>(k) * N;
    for (int i = 0; i < M; ++i) {
      const T aki = a[i];
      if (aki == T(0)) continue;
      T* c = C + static_cast<long long>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += aki * b[j];
    }
  }
}

}  // namespace tma
