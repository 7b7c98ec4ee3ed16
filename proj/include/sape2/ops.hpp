#pragma once

// Differentiable kernels over Tensor. Each op computes its forward value
// eagerly and, when recording, attaches the matching backward closure.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "sape2/gemm.hpp"
#include "sape2/vmath.hpp"
#include "sape2/tensor.hpp"

namespace sape2 {

namespace detail {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape and repeat structure of a suffix-broadcast binary op.
struct Broadcast {
  Shape out;
  bool a_small = false;
  bool b_small = false;
  std::size_t inner = 0;
  std::size_t outer = 0;
};

inline Broadcast suffix_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast r;
  if (a == b) {
    r.out = a;
  } else if (is_suffix(b, a)) {
    r.out = a;
    r.b_small = true;
  } else if (is_suffix(a, b)) {
    r.out = b;
    r.a_small = true;
  } else {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " are not suffix-broadcastable");
  }
  const std::size_t n = shape_numel(r.out);
  r.inner = r.a_small ? shape_numel(a) : (r.b_small ? shape_numel(b) : n);
  r.outer = r.inner == 0 ? 0 : n / r.inner;
  return r;
}

template <typename T>
T stable_sigmoid(T x) {
  const T e = std::exp(-std::abs(x));
  const T y = (x >= T{0} ? T{1} : e) / (T{1} + e);
  // keep the open interval in floating point
  constexpr T lo = std::numeric_limits<T>::denorm_min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / T{2};
  return std::min(std::max(y, lo), hi);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

namespace detail {

// Accumulates g[i % inner] over outer repeats, or g[i] when not broadcast.
template <typename T>
void accumulate_broadcast_grad(std::vector<T>& g, const T* src, bool small, std::size_t outer, std::size_t inner) {
  if (!small) {
    T* dst = g.data();
    const std::size_t n = outer * inner;
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
    return;
  }
  T* dst = g.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const T* row = src + o * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::suffix_broadcast(a.shape(), b.shape(), "add");
  std::vector<T> out(bc.outer * bc.inner);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t o = 0; o < bc.outer; ++o) {
    const T* ar = bc.a_small ? av : av + o * bc.inner;
    const T* br = bc.b_small ? bv : bv + o * bc.inner;
    T* dst = out.data() + o * bc.inner;
    for (std::size_t i = 0; i < bc.inner; ++i) dst[i] = ar[i] + br[i];
  }
  return Tensor<T>::make_result(bc.out, std::move(out), {a, b}, [bc](detail::Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) detail::accumulate_broadcast_grad(*g, self.grad.data(), bc.a_small, bc.outer, bc.inner);
    if (auto* g = parent_grad(self, 1)) detail::accumulate_broadcast_grad(*g, self.grad.data(), bc.b_small, bc.outer, bc.inner);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::suffix_broadcast(a.shape(), b.shape(), "mul");
  std::vector<T> out(bc.outer * bc.inner);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t o = 0; o < bc.outer; ++o) {
    const T* ar = bc.a_small ? av : av + o * bc.inner;
    const T* br = bc.b_small ? bv : bv + o * bc.inner;
    T* dst = out.data() + o * bc.inner;
    for (std::size_t i = 0; i < bc.inner; ++i) dst[i] = ar[i] * br[i];
  }
  return Tensor<T>::make_result(bc.out, std::move(out), {a, b}, [bc](detail::Node<T>& self) {
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    for (std::size_t o = 0; o < bc.outer; ++o) {
      const T* dy = self.grad.data() + o * bc.inner;
      const std::size_t oa = bc.a_small ? 0 : o * bc.inner, ob = bc.b_small ? 0 : o * bc.inner;
      if (ga) {
        T* dst = ga->data() + oa;
        for (std::size_t i = 0; i < bc.inner; ++i) dst[i] += dy[i] * bv[ob + i];
      }
      if (gb) {
        T* dst = gb->data() + ob;
        for (std::size_t i = 0; i < bc.inner; ++i) dst[i] += dy[i] * av[oa + i];
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [s](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T{-1}));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(xv[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      (*g)[i] += self.grad[i] * y * (T{1} - y);
    }
  });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  const bool record = grad_enabled() && x.requires_grad();
  auto cdf = std::make_shared<std::vector<T>>(out.size());
  kernel::erf_scaled(xv.data(), cdf->data(), out.size(), inv_sqrt2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*cdf)[i] = T{0.5} * (T{1} + (*cdf)[i]);
    out[i] = xv[i] * (*cdf)[i];
  }
  if (!record) cdf.reset();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [inv_sqrt2, cdf](detail::Node<T>& self) {
    const auto& xv = self.parents[0]->data;
    auto* g = parent_grad(self, 0);
    const T inv_sqrt2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    std::vector<T> pdf(xv.size());
    for (std::size_t i = 0; i < pdf.size(); ++i) pdf[i] = T{-0.5} * xv[i] * xv[i];
    kernel::exp_shifted(pdf.data(), pdf.size(), T{0});
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      (*g)[i] += self.grad[i] * ((*cdf)[i] + xv[i] * inv_sqrt2pi * pdf[i]);
    }
  });
}

/// min(x, bound); derivative 1 strictly below the bound, 0 at or above it.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& x, T bound) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = std::min(v, bound);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [bound](detail::Node<T>& self) {
    const auto& xv = self.parents[0]->data;
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (xv[i] < bound) (*g)[i] += self.grad[i];
    }
  });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (T v : x.values()) s += v;
  return Tensor<T>::make_result({1}, {s}, {x}, [](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (auto& v : *g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Mean over one axis; the axis is dropped from the shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, long axis) {
  const std::size_t ax = resolve_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  std::vector<T> out(sp.outer * sp.inner, T{0});
  const auto& xv = x.values();
  const T inv = T{1} / static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i] * inv;
  return Tensor<T>::make_result(out_shape, std::move(out), {x}, [sp, inv](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          (*g)[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
  });
}

/// Suffix sums along an axis: out[..., r, ...] = sum over s >= r of x[..., s, ...].
template <typename T>
Tensor<T> reverse_cumsum(const Tensor<T>& x, long axis) {
  const std::size_t ax = resolve_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T acc{0};
      for (std::size_t l = sp.len; l-- > 0;) {
        const std::size_t idx = (o * sp.len + l) * sp.inner + i;
        acc += xv[idx];
        out[idx] = acc;
      }
    }
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [sp](detail::Node<T>& self) {
    // the adjoint of a suffix sum is a prefix sum
    auto* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        T acc{0};
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t idx = (o * sp.len + l) * sp.inner + i;
          acc += self.grad[idx];
          (*g)[idx] += acc;
        }
      }
    }
  });
}

/// Max-subtracted softmax along an axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  const std::size_t ax = resolve_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
      T z{0};
      for (std::size_t l = 0; l < sp.len; ++l) {
        const T e = std::exp(xv[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [sp](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T dot{0};
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t idx = base + l * sp.inner;
          dot += self.grad[idx] * self.data[idx];
        }
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t idx = base + l * sp.inner;
          (*g)[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
  std::vector<T> probs(batch * classes);
  const auto& lv = logits.values();
  T loss{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = lv.data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T z{0};
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    loss += lse - row[labels[b]];
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
  }
  loss /= static_cast<T>(batch);
  return Tensor<T>::make_result(
      {1}, {loss}, {logits},
      [probs = std::move(probs), labels, batch, classes](detail::Node<T>& self) {
        auto* g = parent_grad(self, 0);
        const T s = self.grad[0] / static_cast<T>(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < classes; ++c) {
            const T target = static_cast<int>(c) == labels[b] ? T{1} : T{0};
            (*g)[b * classes + c] += s * (probs[b * classes + c] - target);
          }
        }
      });
}

/// Layer normalization over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T{1e-6}) {
  const std::size_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: feature dim " + std::to_string(d) + " vs gamma " +
                     shape_str(gamma.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), rows, d](detail::Node<T>& self) {
        const auto& gv = self.parents[1]->data;
        auto* gx = parent_grad(self, 0);
        auto* gg = parent_grad(self, 1);
        auto* gb = parent_grad(self, 2);
        const T inv_d = T{1} / static_cast<T>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          T sum_dh{0}, sum_dh_h{0};
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[j] * gv[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
            if (gg) (*gg)[j] += dy[j] * h[j];
            if (gb) (*gb)[j] += dy[j];
          }
          if (!gx) continue;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[j] * gv[j];
            (*gx)[r * d + j] += rstd[r] * (dh - inv_d * sum_dh - h[j] * inv_d * sum_dh_h);
          }
        }
      });
}

// ------------------------------------------------------------------- products

namespace detail {

struct MatmulPlan {
  Shape out;
  std::size_t batch = 1;
  bool a_batched = true;
  bool b_batched = true;
  std::size_t m = 0, k = 0, n = 0;
};

inline MatmulPlan plan_matmul(const Shape& a, const Shape& b, bool trans_b, const char* op) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError(std::string(op) + ": operands must have rank >= 2, got " + shape_str(a) +
                     " and " + shape_str(b));
  }
  MatmulPlan p;
  p.m = a[a.size() - 2];
  p.k = a.back();
  const std::size_t bk = trans_b ? b.back() : b[b.size() - 2];
  p.n = trans_b ? b[b.size() - 2] : b.back();
  if (bk != p.k) {
    throw ShapeError(std::string(op) + ": inner dimensions disagree for " + shape_str(a) +
                     " and " + shape_str(b));
  }
  const Shape la(a.begin(), a.end() - 2), lb(b.begin(), b.end() - 2);
  const std::size_t na = shape_numel(la), nb = shape_numel(lb);
  Shape lead;
  if (la == lb) {
    lead = la;
  } else if (nb == 1) {
    lead = la;
    p.b_batched = false;
  } else if (na == 1) {
    lead = lb;
    p.a_batched = false;
  } else {
    throw ShapeError(std::string(op) + ": batch dimensions disagree for " + shape_str(a) +
                     " and " + shape_str(b));
  }
  p.batch = shape_numel(lead);
  p.out = lead;
  p.out.push_back(p.m);
  p.out.push_back(p.n);
  return p;
}

template <typename T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool trans_b, const char* name) {
  const MatmulPlan p = plan_matmul(a.shape(), b.shape(), trans_b, name);
  std::vector<T> out(shape_numel(p.out));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  const std::size_t sa = p.m * p.k, sb = p.k * p.n, sc = p.m * p.n;
  if (!p.b_batched) {
    // fold the batch into the row dimension
    kernel::gemm(av, false, bv, trans_b, out.data(), p.batch * p.m, p.n, p.k, true);
  } else {
    for (std::size_t i = 0; i < p.batch; ++i) {
      kernel::gemm(av + (p.a_batched ? i * sa : 0), false, bv + i * sb, trans_b,
                   out.data() + i * sc, p.m, p.n, p.k, true);
    }
  }
  return Tensor<T>::make_result(p.out, std::move(out), {a, b}, [p, trans_b](detail::Node<T>& self) {
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    const T* dc = self.grad.data();
    const std::size_t sa = p.m * p.k, sb = p.k * p.n, sc = p.m * p.n;
    if (!p.b_batched) {
      const std::size_t rows = p.batch * p.m;
      // dA = dC op(B)^T
      if (ga) kernel::gemm(dc, false, bv, !trans_b, ga->data(), rows, p.k, p.n, true);
      // dB = A^T dC, or dC^T A when B is stored transposed
      if (gb) {
        if (trans_b) {
          kernel::gemm(dc, true, av, false, gb->data(), p.n, p.k, rows, true);
        } else {
          kernel::gemm(av, true, dc, false, gb->data(), p.k, p.n, rows, true);
        }
      }
      return;
    }
    for (std::size_t i = 0; i < p.batch; ++i) {
      const T* ai = av + (p.a_batched ? i * sa : 0);
      const T* bi = bv + i * sb;
      const T* dci = dc + i * sc;
      if (ga) {
        kernel::gemm(dci, false, bi, !trans_b, ga->data() + (p.a_batched ? i * sa : 0), p.m, p.k,
                     p.n, true);
      }
      if (gb) {
        if (trans_b) {
          kernel::gemm(dci, true, ai, false, gb->data() + i * sb, p.n, p.k, p.m, true);
        } else {
          kernel::gemm(ai, true, dci, false, gb->data() + i * sb, p.k, p.n, p.m, true);
        }
      }
    }
  });
}

}  // namespace detail

/// Batched a @ b over [..., m, k] x [..., k, n]. Either side may be unbatched.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, false, "matmul");
}

/// Batched a @ b^T over [..., m, k] x [..., n, k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, true, "matmul_nt");
}

/// x @ weight + bias with weight stored [in, out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.dim(-1) != weight.dim(0) || bias.shape() != Shape{weight.dim(1)}) {
    throw ShapeError("linear: x " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) + ", bias " +
                     shape_str(bias.shape()));
  }
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  const std::size_t rows = x.numel() / (in == 0 ? 1 : in);
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  const T* bv = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(bv, out_dim, out.data() + r * out_dim);
  kernel::gemm(x.values().data(), false, weight.values().data(), false, out.data(), rows, out_dim, in, true);
  return Tensor<T>::make_result(out_shape, std::move(out), {x, weight, bias},
                                [rows, in, out_dim](detail::Node<T>& self) {
    const T* dy = self.grad.data();
    if (auto* gx = parent_grad(self, 0)) {
      kernel::gemm(dy, false, self.parents[1]->data.data(), true, gx->data(), rows, in, out_dim, true);
    }
    if (auto* gw = parent_grad(self, 1)) {
      kernel::gemm(self.parents[0]->data.data(), true, dy, false, gw->data(), in, out_dim, rows, true);
    }
    if (auto* gb = parent_grad(self, 2)) {
      T* g = gb->data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < out_dim; ++c) g[c] += dy[r * out_dim + c];
    }
  });
}

namespace detail {

// dist[i, j] = |x_i - x_j| for one [n, d] slice (symmetric, zero diagonal).
// xt is scratch for n*d values.
template <typename T>
void pairwise_slice(const T* x, std::size_t n, std::size_t d, T* dist, std::vector<T>& xt) {
  xt.resize(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) xt[c * n + i] = x[i * d + c];
  for (std::size_t i = 0; i < n; ++i) {
    T* row = dist + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] = T{0};
    for (std::size_t c = 0; c < d; ++c) {
      const T xi = x[i * d + c];
      const T* col = xt.data() + c * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T diff = xi - col[j];
        row[j] += diff * diff;
      }
    }
    for (std::size_t j = 0; j < n; ++j) row[j] = std::sqrt(row[j]);
  }
}

// gx += d(sum dy * dist)/dx for one slice:
// dx_i = sum_j w_ij (x_i - x_j) with w_ij = (dy_ij + dy_ji) / dist_ij.
template <typename T>
void pairwise_slice_backward(const T* x, const T* dist, const T* dy, std::size_t n, std::size_t d, T* gx,
                             std::vector<T>& w, std::vector<T>& wx) {
  w.resize(n * n);
  wx.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    T rowsum{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T dij = dist[i * n + j];
      const T wij = dij > T{0} ? (dy[i * n + j] + dy[j * n + i]) / dij : T{0};
      w[i * n + j] = wij;
      rowsum += wij;
    }
    for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += rowsum * x[i * d + c];
  }
  kernel::gemm(w.data(), false, x, false, wx.data(), n, d, n, false);
  for (std::size_t i = 0; i < n * d; ++i) gx[i] -= wx[i];
}

}  // namespace detail

/// Pairwise Euclidean distances between the rows of each [N, D] slice.
///
/// The derivative at a zero distance is taken as zero.
template <typename T>
Tensor<T> pairwise_l2(const Tensor<T>& rows) {
  if (rows.rank() < 2) throw ShapeError("pairwise_l2: need rank >= 2, got " + shape_str(rows.shape()));
  const std::size_t n = rows.dim(-2), d = rows.dim(-1);
  const std::size_t batch = rows.numel() / (n * d == 0 ? 1 : n * d);
  Shape out_shape(rows.shape().begin(), rows.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(batch * n * n);
  std::vector<T> xt;
  for (std::size_t b = 0; b < batch; ++b) {
    detail::pairwise_slice(rows.values().data() + b * n * d, n, d, out.data() + b * n * n, xt);
  }
  return Tensor<T>::make_result(out_shape, std::move(out), {rows}, [batch, n, d](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    const auto& xv = self.parents[0]->data;
    std::vector<T> w, wx;
    for (std::size_t b = 0; b < batch; ++b) {
      detail::pairwise_slice_backward(xv.data() + b * n * d, self.data.data() + b * n * n,
                                      self.grad.data() + b * n * n, n, d, g->data() + b * n * d, w, wx);
    }
  });
}

/// pairwise_l2(a) + pairwise_l2(b) as one node; a: [..., N, Da], b: [..., N, Db]
/// with matching leading dims.
template <typename T>
Tensor<T> pairwise_l2_sum(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != a.rank() || a.dim(-2) != b.dim(-2) ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw ShapeError("pairwise_l2_sum: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(-2), da = a.dim(-1), db = b.dim(-1);
  const std::size_t batch = n == 0 ? 0 : a.numel() / (n * (da ? da : 1));
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  auto dist = std::make_shared<std::vector<T>>(2 * batch * n * n);
  std::vector<T> out(batch * n * n), xt;
  T* dist_a = dist->data();
  T* dist_b = dist->data() + batch * n * n;
  for (std::size_t s = 0; s < batch; ++s) {
    detail::pairwise_slice(a.values().data() + s * n * da, n, da, dist_a + s * n * n, xt);
    detail::pairwise_slice(b.values().data() + s * n * db, n, db, dist_b + s * n * n, xt);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dist_a[i] + dist_b[i];
  return Tensor<T>::make_result(out_shape, std::move(out), {a, b},
                                [batch, n, da, db, dist](detail::Node<T>& self) {
    std::vector<T> w, wx;
    for (std::size_t p = 0; p < 2; ++p) {
      auto* g = parent_grad(self, p);
      if (!g) continue;
      const std::size_t d = p == 0 ? da : db;
      const auto& xv = self.parents[p]->data;
      const T* dp = dist->data() + p * batch * n * n;
      for (std::size_t s = 0; s < batch; ++s) {
        detail::pairwise_slice_backward(xv.data() + s * n * d, dp + s * n * n, self.grad.data() + s * n * n, n, d,
                                        g->data() + s * n * d, w, wx);
      }
    }
  });
}

/// Row softmax of attention logits over [..., T, T]:
///
///   softmax(logit_scale * q k^T + bias_scale * pad(bias))
///
/// q, k: [..., T, d]. bias (may be undefined) covers the last N = T - leading
/// tokens, shape [..., N, N] suffix-broadcast over the leading dims of q;
/// rows and columns of the first `leading` tokens get zero bias.
template <typename T>
Tensor<T> attention_softmax(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& bias, T logit_scale,
                            T bias_scale, std::size_t leading = 0) {
  if (q.rank() < 2 || q.shape() != k.shape()) {
    throw ShapeError("attention_softmax: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
  }
  const std::size_t t = q.dim(-2), d = q.dim(-1);
  const std::size_t batch = q.numel() / (t * d == 0 ? 1 : t * d);
  const bool has_bias = bias.defined();
  std::size_t bias_batch = 1;
  const std::size_t n = t - leading;
  if (has_bias) {
    if (leading > t || bias.rank() < 2 || bias.dim(-1) != n || bias.dim(-2) != n) {
      throw ShapeError("attention_softmax: bias " + shape_str(bias.shape()) + " vs " + std::to_string(t) +
                       " tokens with " + std::to_string(leading) + " leading");
    }
    const Shape lead_q(q.shape().begin(), q.shape().end() - 2), lead_b(bias.shape().begin(), bias.shape().end() - 2);
    if (!detail::is_suffix(lead_b, lead_q)) {
      throw ShapeError("attention_softmax: bias " + shape_str(bias.shape()) + " does not broadcast over q " +
                       shape_str(q.shape()));
    }
    bias_batch = shape_numel(lead_b);
  }
  Shape out_shape(q.shape().begin(), q.shape().end() - 1);
  out_shape.push_back(t);
  std::vector<T> out(batch * t * t);
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  for (std::size_t s = 0; s < batch; ++s) {
    T* o = out.data() + s * t * t;
    kernel::gemm(qv + s * t * d, false, kv + s * t * d, true, o, t, t, d, false);
    for (std::size_t i = 0; i < t * t; ++i) o[i] *= logit_scale;
    if (has_bias) {
      const T* bv = bias.values().data() + (s % bias_batch) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        T* row = o + (leading + i) * t + leading;
        for (std::size_t j = 0; j < n; ++j) row[j] += bias_scale * bv[i * n + j];
      }
    }
    for (std::size_t i = 0; i < t; ++i) {
      T* row = o + i * t;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < t; ++j) mx = std::max(mx, row[j]);
      kernel::exp_shifted(row, t, mx);
      T z{0};
      for (std::size_t j = 0; j < t; ++j) z += row[j];
      const T inv = T{1} / z;
      for (std::size_t j = 0; j < t; ++j) row[j] *= inv;
    }
  }
  std::vector<Tensor<T>> inputs{q, k};
  if (has_bias) inputs.push_back(bias);
  return Tensor<T>::make_result(
      out_shape, std::move(out), std::move(inputs),
      [batch, t, d, n, leading, bias_batch, has_bias, logit_scale, bias_scale](detail::Node<T>& self) {
        auto* gq = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        auto* gb = has_bias ? parent_grad(self, 2) : nullptr;
        const T* qv = self.parents[0]->data.data();
        const T* kv = self.parents[1]->data.data();
        std::vector<T> dl(t * t);
        for (std::size_t s = 0; s < batch; ++s) {
          const T* p = self.data.data() + s * t * t;
          const T* dp = self.grad.data() + s * t * t;
          for (std::size_t i = 0; i < t; ++i) {
            T dot{0};
            for (std::size_t j = 0; j < t; ++j) dot += dp[i * t + j] * p[i * t + j];
            for (std::size_t j = 0; j < t; ++j) dl[i * t + j] = p[i * t + j] * (dp[i * t + j] - dot);
          }
          if (gb) {
            T* g = gb->data() + (s % bias_batch) * n * n;
            for (std::size_t i = 0; i < n; ++i) {
              const T* row = dl.data() + (leading + i) * t + leading;
              for (std::size_t j = 0; j < n; ++j) g[i * n + j] += bias_scale * row[j];
            }
          }
          for (auto& v : dl) v *= logit_scale;
          if (gq) kernel::gemm(dl.data(), false, kv + s * t * d, false, gq->data() + s * t * d, t, d, t, true);
          if (gk) kernel::gemm(dl.data(), true, qv + s * t * d, false, gk->data() + s * t * d, t, d, t, true);
        }
      });
}

/// Linear interpolation of integer-position logits at real positions.
///
/// table: [..., L, P] holds values at integer positions 0..P-1 for each of
/// the L rows. pos: [..., L, R] holds real positions in [0, P-1]. The result
/// out[..., l, r] interpolates row l of the table at pos[..., l, r]. Floor and
/// ceil are locally constant, so the position gradient is the knot slope.
template <typename T>
Tensor<T> interpolate_positions(const Tensor<T>& table, const Tensor<T>& pos) {
  if (table.rank() < 2 || pos.rank() != table.rank()) {
    throw ShapeError("interpolate_positions: table " + shape_str(table.shape()) + " vs positions " +
                     shape_str(pos.shape()));
  }
  const Shape lead_t(table.shape().begin(), table.shape().end() - 1);
  const Shape lead_p(pos.shape().begin(), pos.shape().end() - 1);
  if (lead_t != lead_p) {
    throw ShapeError("interpolate_positions: table " + shape_str(table.shape()) + " vs positions " +
                     shape_str(pos.shape()));
  }
  const std::size_t knots = table.dim(-1), r = pos.dim(-1);
  const std::size_t rows = shape_numel(lead_t);
  const T max_pos = static_cast<T>(knots - 1);
  const auto& tv = table.values();
  const auto& pv = pos.values();
  std::vector<T> out(rows * r);
  for (std::size_t l = 0; l < rows; ++l) {
    const T* z = tv.data() + l * knots;
    for (std::size_t c = 0; c < r; ++c) {
      const T p = pv[l * r + c];
      if (!(p >= T{0} && p <= max_pos)) {
        throw std::out_of_range("interpolate_positions: position " + std::to_string(p) +
                                " outside [0, " + std::to_string(knots - 1) + "]");
      }
      const T fl = std::floor(p);
      const auto lo = static_cast<std::size_t>(fl);
      const auto hi = static_cast<std::size_t>(std::ceil(p));
      const T w = p - fl;
      out[l * r + c] = w * z[hi] + (T{1} - w) * z[lo];
    }
  }
  return Tensor<T>::make_result(
      pos.shape(), std::move(out), {table, pos}, [rows, knots, r](detail::Node<T>& self) {
        const auto& tv = self.parents[0]->data;
        const auto& pv = self.parents[1]->data;
        auto* gt = parent_grad(self, 0);
        auto* gp = parent_grad(self, 1);
        for (std::size_t l = 0; l < rows; ++l) {
          const T* z = tv.data() + l * knots;
          for (std::size_t c = 0; c < r; ++c) {
            const T p = pv[l * r + c];
            const T fl = std::floor(p);
            const auto lo = static_cast<std::size_t>(fl);
            const auto hi = static_cast<std::size_t>(std::ceil(p));
            const T w = p - fl;
            const T dy = self.grad[l * r + c];
            if (gt) {
              (*gt)[l * knots + hi] += dy * w;
              (*gt)[l * knots + lo] += dy * (T{1} - w);
            }
            if (gp) (*gp)[l * r + c] += dy * (z[hi] - z[lo]);
          }
        }
      });
}

/// Rotates consecutive feature pairs of each row by per-row angles.
///
/// x: [..., N, D] with D even; angles: [N, D/2]. Pair t of row n becomes
/// (x0 cos a - x1 sin a, x0 sin a + x1 cos a) with a = angles[n, t].
template <typename T>
Tensor<T> rotate_pairs(const Tensor<T>& x, const std::vector<T>& angles) {
  const std::size_t n = x.dim(-2), d = x.dim(-1);
  if (d % 2 != 0 || angles.size() != n * d / 2) {
    throw ShapeError("rotate_pairs: input " + shape_str(x.shape()) + " with " +
                     std::to_string(angles.size()) + " angles");
  }
  std::vector<T> cs(angles.size()), sn(angles.size());
  for (std::size_t i = 0; i < angles.size(); ++i) {
    cs[i] = std::cos(angles[i]);
    sn[i] = std::sin(angles[i]);
  }
  const std::size_t batch = x.numel() / (n * d);
  const auto& xv = x.values();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t row = 0; row < n; ++row) {
      const std::size_t base = (b * n + row) * d;
      for (std::size_t t = 0; t < d / 2; ++t) {
        const T c = cs[row * d / 2 + t], s = sn[row * d / 2 + t];
        const T x0 = xv[base + 2 * t], x1 = xv[base + 2 * t + 1];
        out[base + 2 * t] = x0 * c - x1 * s;
        out[base + 2 * t + 1] = x0 * s + x1 * c;
      }
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [cs = std::move(cs), sn = std::move(sn), batch, n, d](detail::Node<T>& self) {
        auto* g = parent_grad(self, 0);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t row = 0; row < n; ++row) {
            const std::size_t base = (b * n + row) * d;
            for (std::size_t t = 0; t < d / 2; ++t) {
              const T c = cs[row * d / 2 + t], s = sn[row * d / 2 + t];
              const T g0 = self.grad[base + 2 * t], g1 = self.grad[base + 2 * t + 1];
              (*g)[base + 2 * t] += g0 * c + g1 * s;
              (*g)[base + 2 * t + 1] += -g0 * s + g1 * c;
            }
          }
        }
      });
}

// ------------------------------------------------------------ shape movement

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return Tensor<T>::make_result(std::move(shape), x.values(), {x}, [](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

namespace detail {

// Source strides of a permuted view, listed in output axis order.
inline std::vector<std::size_t> permute_strides(const Shape& in, const std::vector<std::size_t>& perm,
                                                Shape& out_shape) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  out_shape.resize(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  return stride;
}

// Walks the output in row-major order, calling f(out_offset, src_offset,
// len, src_step) once per innermost run.
template <typename F>
void for_each_permuted_run(const Shape& out_shape, const std::vector<std::size_t>& stride, F&& f) {
  const std::size_t rank = out_shape.size();
  const std::size_t total = shape_numel(out_shape);
  if (total == 0) return;
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{0});
    return;
  }
  const std::size_t len = out_shape[rank - 1], step = stride[rank - 1];
  std::vector<std::size_t> counter(rank - 1, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; flat += len) {
    f(flat, offset, len, step);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        offset += stride[ax];
        break;
      }
      offset -= stride[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
}

}  // namespace detail

/// Reorders axes: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) {
    throw ShapeError("permute: " + std::to_string(perm.size()) + " axes for shape " +
                     shape_str(x.shape()));
  }
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || used[p]) throw ShapeError("permute: invalid axis permutation");
    used[p] = true;
  }
  Shape out_shape;
  auto stride = detail::permute_strides(x.shape(), perm, out_shape);
  const T* xv = x.values().data();
  std::vector<T> out(x.numel());
  detail::for_each_permuted_run(out_shape, stride, [&](std::size_t o, std::size_t src, std::size_t len, std::size_t step) {
    for (std::size_t j = 0; j < len; ++j) out[o + j] = xv[src + j * step];
  });
  return Tensor<T>::make_result(out_shape, std::move(out), {x}, [out_shape, stride](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    T* gv = g->data();
    const T* dy = self.grad.data();
    detail::for_each_permuted_run(out_shape, stride, [&](std::size_t o, std::size_t src, std::size_t len, std::size_t step) {
      for (std::size_t j = 0; j < len; ++j) gv[src + j * step] += dy[o + j];
    });
  });
}

/// Elements [begin, end) along an axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = resolve_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (begin > end || end > sp.len) {
    throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for axis of size " + std::to_string(sp.len));
  }
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  const auto& xv = x.values();
  std::vector<T> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<long>((o * sp.len + begin) * sp.inner), len * sp.inner,
                out.begin() + static_cast<long>(o * len * sp.inner));
  }
  return Tensor<T>::make_result(out_shape, std::move(out), {x}, [sp, begin, len](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < len * sp.inner; ++j)
        (*g)[(o * sp.len + begin) * sp.inner + j] += self.grad[o * len * sp.inner + j];
  });
}

/// Index along an axis; the axis is dropped.
template <typename T>
Tensor<T> select(const Tensor<T>& x, long axis, std::size_t index) {
  const std::size_t ax = resolve_axis(axis, x.rank());
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  return reshape(slice(x, axis, index, index + 1), out_shape);
}

/// Joins two tensors along an axis; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, long axis) {
  const std::size_t ax = resolve_axis(axis, a.rank());
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError("concat: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (i != ax && sa[i] != sb[i]) {
      throw ShapeError("concat: shapes " + shape_str(sa) + " and " + shape_str(sb) + " differ off-axis");
    }
  }
  const auto pa = detail::split_at(sa, ax), pb = detail::split_at(sb, ax);
  Shape out_shape = sa;
  out_shape[ax] = pa.len + pb.len;
  const std::size_t row = (pa.len + pb.len) * pa.inner;
  std::vector<T> out(pa.outer * row);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t o = 0; o < pa.outer; ++o) {
    std::copy_n(av.begin() + static_cast<long>(o * pa.len * pa.inner), pa.len * pa.inner,
                out.begin() + static_cast<long>(o * row));
    std::copy_n(bv.begin() + static_cast<long>(o * pb.len * pb.inner), pb.len * pb.inner,
                out.begin() + static_cast<long>(o * row + pa.len * pa.inner));
  }
  return Tensor<T>::make_result(out_shape, std::move(out), {a, b}, [pa, pb, row](detail::Node<T>& self) {
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    for (std::size_t o = 0; o < pa.outer; ++o) {
      if (ga)
        for (std::size_t j = 0; j < pa.len * pa.inner; ++j) (*ga)[o * pa.len * pa.inner + j] += self.grad[o * row + j];
      if (gb)
        for (std::size_t j = 0; j < pb.len * pb.inner; ++j)
          (*gb)[o * pb.len * pb.inner + j] += self.grad[o * row + pa.len * pa.inner + j];
    }
  });
}

/// Prepends one shared token: x [B, N, D], token [D] -> [B, N+1, D].
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  if (x.rank() != 3 || token.numel() != x.dim(2)) {
    throw ShapeError("prepend_token: " + shape_str(x.shape()) + " with token " + shape_str(token.shape()));
  }
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<T> out(b * (n + 1) * d);
  const auto& xv = x.values();
  const auto& tv = token.values();
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(tv.begin(), tv.end(), out.begin() + static_cast<long>(i * (n + 1) * d));
    std::copy_n(xv.begin() + static_cast<long>(i * n * d), n * d,
                out.begin() + static_cast<long>(i * (n + 1) * d + d));
  }
  return Tensor<T>::make_result({b, n + 1, d}, std::move(out), {x, token}, [b, n, d](detail::Node<T>& self) {
    auto* gx = parent_grad(self, 0);
    auto* gt = parent_grad(self, 1);
    for (std::size_t i = 0; i < b; ++i) {
      const T* src = self.grad.data() + i * (n + 1) * d;
      if (gt)
        for (std::size_t j = 0; j < d; ++j) (*gt)[j] += src[j];
      if (gx)
        for (std::size_t j = 0; j < n * d; ++j) (*gx)[i * n * d + j] += src[d + j];
    }
  });
}

/// Zero-pads the last two axes of [..., N, N] at the front: -> [..., N+1, N+1].
template <typename T>
Tensor<T> pad_leading_token(const Tensor<T>& x) {
  const std::size_t n = x.dim(-1);
  if (x.dim(-2) != n) throw ShapeError("pad_leading_token: need square trailing dims, got " + shape_str(x.shape()));
  const std::size_t batch = x.numel() / (n * n);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 1] = n + 1;
  out_shape[out_shape.size() - 2] = n + 1;
  std::vector<T> out(batch * (n + 1) * (n + 1), T{0});
  const auto& xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(xv.begin() + static_cast<long>((b * n + i) * n), n,
                  out.begin() + static_cast<long>((b * (n + 1) + i + 1) * (n + 1) + 1));
  return Tensor<T>::make_result(out_shape, std::move(out), {x}, [batch, n](detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          (*g)[(b * n + i) * n + j] += self.grad[(b * (n + 1) + i + 1) * (n + 1) + j + 1];
  });
}

}  // namespace sape2
