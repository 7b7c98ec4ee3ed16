#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace sape2::kernel {

// Direct loops for products too small to amortize a blocked kernel.
template <typename T>
void small_gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t n,
                std::size_t k, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  if (trans_b && !trans_a) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

/// C (m x n) = op(A) * op(B), or C += op(A) * op(B) when accumulate is set.
///
/// All buffers are row-major. op(A) is m x k: A is stored m x k, or k x m
/// when trans_a is set. op(B) is k x n: B is stored k x n, or n x k when
/// trans_b is set.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t n,
          std::size_t k, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using Idx = Eigen::Index;
  const auto M = static_cast<Idx>(m), N = static_cast<Idx>(n), K = static_cast<Idx>(k);
  if (m * n * k <= 4096) {
    small_gemm(a, trans_a, b, trans_b, c, m, n, k, accumulate);
    return;
  }
  Eigen::Map<Mat> C(c, M, N);
  if (!accumulate) C.setZero();
  if (k == 0 || m == 0 || n == 0) return;
  // Eigen picks the transposed kernels from the expression type.
  if (!trans_a && !trans_b) {
    C.noalias() += CMap(a, M, K) * CMap(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += CMap(a, M, K) * CMap(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += CMap(a, K, M).transpose() * CMap(b, K, N);
  } else {
    C.noalias() += CMap(a, K, M).transpose() * CMap(b, N, K).transpose();
  }
}

}  // namespace sape2::kernel
