#pragma once

#include <algorithm>
#include <cstddef>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

namespace sape2::kernel {

// Applies `f` through an aligned, zero-padded block so every element takes
// the packet path regardless of the caller's alignment.
template <typename T, typename F>
void blockwise(const T* x, T* out, std::size_t n, F&& f) {
  constexpr Eigen::Index kBlock = 256;
  using Block = Eigen::Array<T, kBlock, 1>;
  Block in, res;
  for (std::size_t start = 0; start < n; start += kBlock) {
    const auto len = static_cast<Eigen::Index>(std::min<std::size_t>(kBlock, n - start));
    if (len < kBlock) in.setZero();
    std::copy(x + start, x + start + len, in.data());
    res = f(in);
    std::copy(res.data(), res.data() + len, out + start);
  }
}

/// x[i] = exp(x[i] - shift)
template <typename T>
void exp_shifted(T* x, std::size_t n, T shift) {
  blockwise(x, x, n, [shift](const auto& a) { return (a - shift).exp(); });
}

/// out[i] = erf(x[i] * s)
template <typename T>
void erf_scaled(const T* x, T* out, std::size_t n, T s) {
  blockwise(x, out, n, [s](const auto& a) { return (a * s).erf(); });
}

}  // namespace sape2::kernel
