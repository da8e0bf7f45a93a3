#pragma once

#include <cblas.h>

#include <cstdint>

namespace dfkd {

// Row-major C[m,n] (+)= A[m,k] * B[k,n], with optional transposes on the
// logical operands (dimensions are those of the *product* operands).
template <class T>
inline void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha, const T* a,
                 const T* b, T beta, T* c) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  const int ldc = static_cast<int>(n);
  if constexpr (sizeof(T) == sizeof(double)) {
    cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), static_cast<double>(alpha),
                reinterpret_cast<const double*>(a), lda, reinterpret_cast<const double*>(b), ldb,
                static_cast<double>(beta), reinterpret_cast<double*>(c), ldc);
  } else {
    cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), static_cast<float>(alpha), reinterpret_cast<const float*>(a),
                lda, reinterpret_cast<const float*>(b), ldb, static_cast<float>(beta),
                reinterpret_cast<float*>(c), ldc);
  }
}

}  // namespace dfkd
