#pragma once

// Slow reference implementations for tests. Everything here is scalar loops
// over std::vector<double>; nothing calls into the Tensor kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <iomanip>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sape2/grid.hpp"

namespace sape2::oracle {

/// Result of comparing an array against its reference.
///
/// max_rel_err is max |a - e| divided by the largest magnitude in either
/// array; below 1e-12 magnitude it falls back to the absolute error.
struct OracleReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t location = 0;
  std::vector<std::size_t> index;  // multi-index of location, when a shape was given
  double tolerance = 0.0;
  bool pass = true;
};

inline std::ostream& operator<<(std::ostream& os, const OracleReport& r) {
  os << (r.pass ? "pass" : "FAIL") << " max_abs=" << std::scientific << std::setprecision(3) << r.max_abs_err
     << " max_rel=" << r.max_rel_err << " tol=" << r.tolerance << " at [";
  if (r.index.empty()) {
    os << r.location;
  } else {
    for (std::size_t i = 0; i < r.index.size(); ++i) os << (i ? "," : "") << r.index[i];
  }
  return os << "]" << std::defaultfloat;
}

template <typename A, typename E>
OracleReport compare(std::span<const A> actual, std::span<const E> expected, double tolerance,
                     const std::vector<std::size_t>& shape = {}) {
  if (actual.size() != expected.size()) {
    throw std::invalid_argument("compare: sizes " + std::to_string(actual.size()) + " vs " +
                                std::to_string(expected.size()));
  }
  OracleReport r;
  r.tolerance = tolerance;
  double magnitude = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double a = static_cast<double>(actual[i]), e = static_cast<double>(expected[i]);
    const double err = std::abs(a - e);
    if (!(err <= r.max_abs_err)) {  // also catches NaN
      r.max_abs_err = std::isnan(err) ? INFINITY : err;
      r.location = i;
    }
    magnitude = std::max({magnitude, std::abs(a), std::abs(e)});
  }
  r.max_rel_err = magnitude < 1e-12 ? r.max_abs_err : r.max_abs_err / magnitude;
  r.pass = r.max_rel_err <= tolerance;
  if (!shape.empty()) {
    r.index.resize(shape.size());
    std::size_t rem = r.location;
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      r.index[ax] = rem % shape[ax];
      rem /= shape[ax];
    }
  }
  return r;
}

template <typename A, typename E>
OracleReport compare(const std::vector<A>& actual, const std::vector<E>& expected, double tolerance,
                     const std::vector<std::size_t>& shape = {}) {
  return compare(std::span<const A>(actual), std::span<const E>(expected), tolerance, shape);
}

inline double scalar_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Triple-loop row-major matrix product, [m, k] x [k, n].
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

/// Distances between rows of an [n, d] matrix by the definition.
inline std::vector<double> naive_pairwise_l2(const std::vector<double>& x, std::size_t n, std::size_t d) {
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += (x[i * d + c] - x[j * d + c]) * (x[i * d + c] - x[j * d + c]);
      out[i * n + j] = std::sqrt(acc);
    }
  return out;
}

/// A complete SaPE2 instance in flat row-major buffers.
struct SapeProblem {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t rows = 1;  // H
  std::size_t cols = 1;  // W
  std::size_t dim = 1;   // head dim
  std::size_t max_x = 1;  // M for the x table
  std::size_t max_y = 1;
  std::vector<double> q;        // [batch, heads, H*W, dim]
  std::vector<double> k;        // same
  std::vector<double> table_x;  // [dim, max_x + 1]
  std::vector<double> table_y;  // [dim, max_y + 1]
  double gate_scale = 1.0;
  SapeMode mode = SapeMode::key;
  ClampMode clamp = ClampMode::code;

  std::size_t tokens() const { return rows * cols; }
  double q_at(std::size_t b, std::size_t h, std::size_t i, std::size_t c) const {
    return q[((b * heads + h) * tokens() + i) * dim + c];
  }
  double k_at(std::size_t b, std::size_t h, std::size_t i, std::size_t c) const {
    return k[((b * heads + h) * tokens() + i) * dim + c];
  }
};

/// Gate-sum position of target index m (0-based along the axis) as seen
/// from patch i, before clamping: the sum over axis-mates j at or beyond m.
inline double raw_position(const SapeProblem& pr, std::size_t b, std::size_t h, std::size_t i, std::size_t m,
                           Axis axis) {
  const std::size_t xi = i % pr.cols, yi = i / pr.cols;
  const std::size_t len = axis == Axis::x ? pr.cols : pr.rows;
  double p = 0.0;
  for (std::size_t j = m; j < len; ++j) {
    const std::size_t other = axis == Axis::x ? yi * pr.cols + j : j * pr.cols + xi;
    double dot = 0.0;
    for (std::size_t c = 0; c < pr.dim; ++c) dot += pr.q_at(b, h, i, c) * pr.k_at(b, h, other, c);
    p += scalar_sigmoid(pr.gate_scale * dot);
  }
  return p;
}

/// Axis vectors [batch, heads, N, L] by building each interpolated embedding
/// explicitly and projecting it; no integer-logit shortcut.
inline std::vector<double> direct_sape_vectors(const SapeProblem& pr, Axis axis) {
  const std::size_t n = pr.tokens(), len = axis == Axis::x ? pr.cols : pr.rows;
  const std::size_t m_max = axis == Axis::x ? pr.max_x : pr.max_y;
  const auto& table = axis == Axis::x ? pr.table_x : pr.table_y;
  const double bound = clamp_bound(m_max, pr.clamp);
  std::vector<double> out(pr.batch * pr.heads * n * len);
  std::vector<double> emb(pr.dim);
  for (std::size_t b = 0; b < pr.batch; ++b)
    for (std::size_t h = 0; h < pr.heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < len; ++m) {
          const double p = std::min(raw_position(pr, b, h, i, m, axis), bound);
          const double lo = std::floor(p), hi = std::ceil(p);
          const auto ilo = static_cast<std::size_t>(lo), ihi = static_cast<std::size_t>(hi);
          for (std::size_t c = 0; c < pr.dim; ++c) {
            emb[c] = (p - lo) * table[c * (m_max + 1) + ihi] + (1.0 - p + lo) * table[c * (m_max + 1) + ilo];
          }
          double z = 0.0;
          for (std::size_t c = 0; c < pr.dim; ++c) {
            double proj = 0.0;
            if (pr.mode != SapeMode::key) proj += pr.q_at(b, h, i, c);
            if (pr.mode != SapeMode::query) proj += pr.k_at(b, h, i, c);
            z += proj * emb[c];
          }
          out[((b * pr.heads + h) * n + i) * len + m] = z;
        }
  return out;
}

/// Bias field [batch, heads, N, N] from scalar gates, suffix sums,
/// interpolation and distances.
inline std::vector<double> brute_force_bias(const SapeProblem& pr) {
  const std::size_t n = pr.tokens();
  const auto vx = direct_sape_vectors(pr, Axis::x);
  const auto vy = direct_sape_vectors(pr, Axis::y);
  std::vector<double> out(pr.batch * pr.heads * n * n);
  for (std::size_t bh = 0; bh < pr.batch * pr.heads; ++bh)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double sx = 0.0, sy = 0.0;
        for (std::size_t r = 0; r < pr.cols; ++r) {
          const double d = vx[(bh * n + i) * pr.cols + r] - vx[(bh * n + j) * pr.cols + r];
          sx += d * d;
        }
        for (std::size_t r = 0; r < pr.rows; ++r) {
          const double d = vy[(bh * n + i) * pr.rows + r] - vy[(bh * n + j) * pr.rows + r];
          sy += d * d;
        }
        out[(bh * n + i) * n + j] = std::sqrt(sx) + std::sqrt(sy);
      }
  return out;
}

/// Scalar-loop attention for one head. q, k: [T, d]; v: [T, dv]; bias: [T, T]
/// or empty. pre_scale selects (qk + s b)/sqrt(d) over qk/sqrt(d) + s b.
inline std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                           const std::vector<double>& v, const std::vector<double>& bias,
                                           std::size_t tokens, std::size_t d, std::size_t dv, bool pre_scale = true,
                                           double bias_sign = 1.0) {
  std::vector<double> out(tokens * dv, 0.0);
  std::vector<double> w(tokens);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < tokens; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < tokens; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      const double b = bias.empty() ? 0.0 : bias_sign * bias[i * tokens + j];
      w[j] = pre_scale ? (dot + b) * s : dot * s + b;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < tokens; ++j) {
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    for (std::size_t j = 0; j < tokens; ++j)
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += w[j] / z * v[j * dv + c];
  }
  return out;
}

/// Central differences of a scalar function over every coordinate of every
/// parameter buffer. The buffers are perturbed in place and restored.
inline std::vector<std::vector<double>> finite_difference_grad(const std::function<double()>& f,
                                                               const std::vector<std::span<double>>& params,
                                                               double step = 1e-6) {
  std::vector<std::vector<double>> grads;
  for (auto p : params) {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + step;
      const double up = f();
      p[i] = orig - step;
      const double down = f();
      p[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::domain_error("finite_difference_grad: non-finite function value");
      }
      g[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// Scalar CoPE positions for one head: p[i][j] = sum_{t=j..i} sigmoid(s q_i.k_t)
/// for j <= i, zero otherwise.
inline std::vector<double> naive_cope_positions(const std::vector<double>& q, const std::vector<double>& k,
                                                std::size_t tokens, std::size_t d, double gate_scale) {
  std::vector<double> p(tokens * tokens, 0.0);
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (std::size_t t = j; t <= i; ++t) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[t * d + c];
        acc += scalar_sigmoid(gate_scale * dot);
      }
      p[i * tokens + j] = acc;
    }
  return p;
}

/// Scalar CoPE bias for one head with table [d, M+1]: q_i . e[p_ij] for j <= i.
inline std::vector<double> naive_cope_bias(const std::vector<double>& q, const std::vector<double>& k,
                                           const std::vector<double>& table, std::size_t tokens, std::size_t d,
                                           std::size_t max_position, double gate_scale) {
  const auto p = naive_cope_positions(q, k, tokens, d, gate_scale);
  std::vector<double> out(tokens * tokens, 0.0);
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double pos = std::min(p[i * tokens + j], static_cast<double>(max_position));
      const double lo = std::floor(pos);
      const auto ilo = static_cast<std::size_t>(lo), ihi = static_cast<std::size_t>(std::ceil(pos));
      double z = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double e = (pos - lo) * table[c * (max_position + 1) + ihi] +
                         (1.0 - pos + lo) * table[c * (max_position + 1) + ilo];
        z += q[i * d + c] * e;
      }
      out[i * tokens + j] = z;
    }
  return out;
}

/// Golden record set: `# key value` header lines describing the inputs,
/// then one `index value` line per output element.
struct GoldenFile {
  std::map<std::string, std::string> header;
  std::vector<double> values;
};

inline void write_golden(const std::filesystem::path& path, const GoldenFile& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write golden file " + path.string());
  for (const auto& [k, v] : g.header) out << "# " << k << ' ' << v << '\n';
  out << std::setprecision(17);
  for (std::size_t i = 0; i < g.values.size(); ++i) out << i << ' ' << g.values[i] << '\n';
}

inline GoldenFile read_golden(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read golden file " + path.string());
  GoldenFile g;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    if (line[0] == '#') {
      std::string hash, key, value;
      is >> hash >> key;
      std::getline(is >> std::ws, value);
      g.header[key] = value;
      continue;
    }
    std::size_t index = 0;
    double value = 0.0;
    if (!(is >> index >> value) || index != g.values.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed golden record");
    }
    g.values.push_back(value);
  }
  return g;
}

}  // namespace sape2::oracle
