#pragma once

// Oracle and invariant checks over the numeric kernels, the baseline
// encodings and SaPE2, runnable outside the unit-test framework. Each check
// condenses its instances into one OracleReport (the worst one seen).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sape2/attention.hpp"
#include "sape2/fixture.hpp"
#include "sape2/oracles.hpp"
#include "sape2/pe_baselines.hpp"
#include "sape2/sape2.hpp"
#include "sape2/vit.hpp"

namespace sape2::selftest {

using oracle::OracleReport;
using TensorD = Tensor<double>;

struct Outcome {
  OracleReport report;
  std::string note;
};

struct Check {
  std::string module;
  std::string name;
  std::function<Outcome()> run;
};

struct CheckResult {
  std::string module;
  std::string name;
  Outcome outcome;
  double seconds = 0.0;
  bool pass() const { return outcome.report.pass; }
};

/// Folds `r` into `acc`, keeping the first failure or else the largest
/// relative error.
inline void absorb(OracleReport& acc, const OracleReport& r) {
  const bool pass = acc.pass && r.pass;
  if ((!r.pass && acc.pass) || (r.pass == acc.pass && r.max_rel_err > acc.max_rel_err)) acc = r;
  acc.pass = pass;
}

inline OracleReport fresh(double tolerance) {
  OracleReport r;
  r.tolerance = tolerance;
  return r;
}

/// Report for a scalar violation measure, passing when it is within tolerance.
inline OracleReport violation(double worst, double tolerance) {
  OracleReport r;
  r.max_abs_err = r.max_rel_err = worst;
  r.tolerance = tolerance;
  r.pass = worst <= tolerance;
  return r;
}

inline std::vector<double> flat(const TensorD& t) { return {t.values().begin(), t.values().end()}; }

// ---------------------------------------------------------------------------
// numeric kernels

inline Outcome check_matmul() {
  auto acc = fresh(1e-12);
  Rng rng(1);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 5, 7}, {17, 23, 11}, {40, 70, 30}}) {
    const auto a = TensorD::randn({m, k}, rng), b = TensorD::randn({k, n}, rng);
    absorb(acc, oracle::compare(matmul(a, b).values(), oracle::naive_matmul(flat(a), flat(b), m, k, n), 1e-12));
  }
  return {acc, "4 shapes"};
}

inline Outcome check_pairwise_l2() {
  auto acc = fresh(1e-12);
  Rng rng(2);
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{1, 3}, {5, 4}, {16, 8}, {64, 8}}) {
    const auto x = TensorD::randn({n, d}, rng);
    absorb(acc, oracle::compare(pairwise_l2(x).values(), oracle::naive_pairwise_l2(flat(x), n, d), 1e-12));
  }
  return {acc, "4 shapes"};
}

inline Outcome check_attention() {
  auto acc = fresh(1e-12);
  Rng rng(3);
  const std::size_t t = 9, d = 8;
  for (bool pre : {true, false}) {
    for (double sign : {1.0, -1.0}) {
      const auto q = TensorD::randn({1, 1, t, d}, rng), k = TensorD::randn({1, 1, t, d}, rng);
      const auto v = TensorD::randn({1, 1, t, d}, rng), b = TensorD::randn({1, 1, t, t}, rng);
      AttentionOptions o{pre ? BiasPlacement::pre_scale : BiasPlacement::post_scale, sign};
      const auto fast = scaled_attention(q, k, v, b, o);
      absorb(acc, oracle::compare(fast.values(),
                                  oracle::naive_attention(flat(q), flat(k), flat(v), flat(b), t, d, d, pre, sign),
                                  1e-12));
    }
  }
  return {acc, "pre/post scale, both signs"};
}

inline Outcome check_kernel_gradients() {
  auto acc = fresh(1e-6);
  Rng rng(4);
  const auto x = TensorD::randn({3, 5}, rng), w = TensorD::randn({3, 5}, rng);
  const auto a = TensorD::randn({2, 6, 3}, rng), b = TensorD::randn({2, 6, 2}, rng), wb = TensorD::randn({2, 6, 6}, rng);
  const auto table = TensorD::randn({2, 4, 5}, rng);
  auto pos = TensorD::uniform({2, 4, 3}, rng, 0.05, 3.95);
  for (auto& p : pos.values()) p = std::floor(p) + 0.1 + 0.8 * (p - std::floor(p));
  const auto wi = TensorD::randn({2, 4, 3}, rng);
  for (const auto& r : oracle::gradient_check([w](const auto& t) { return sum(mul(softmax(t[0], -1), w)); }, {x}))
    absorb(acc, r);
  for (const auto& r : oracle::gradient_check([w](const auto& t) { return sum(mul(reverse_cumsum(t[0], -1), w)); }, {x}))
    absorb(acc, r);
  for (const auto& r :
       oracle::gradient_check([wb](const auto& t) { return sum(mul(pairwise_l2_sum(t[0], t[1]), wb)); }, {a, b}))
    absorb(acc, r);
  for (const auto& r : oracle::gradient_check(
           [wi](const auto& t) { return sum(mul(interpolate_positions(t[0], t[1]), wi)); }, {table, pos}))
    absorb(acc, r);
  return {acc, "softmax, reverse_cumsum, pairwise_l2_sum, interpolation"};
}

// ---------------------------------------------------------------------------
// baseline encodings

inline Outcome check_cope() {
  auto acc = fresh(1e-10);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const std::size_t t = 6, d = 4, m = 4;
    const auto q = TensorD::randn({t, d}, rng), k = TensorD::randn({t, d}, rng);
    const PositionTable<double> table{TensorD::randn({d, m + 1}, rng)};
    absorb(acc, oracle::compare(cope1d(q, k, table, 0.5).values(),
                                oracle::naive_cope_bias(flat(q), flat(k), flat(table.emb), t, d, m, 0.5), 1e-10));
  }
  return {acc, "5 seeds"};
}

inline Outcome check_rope2d() {
  // q_i . k_j after rotation must depend only on the grid offset
  double worst = 0.0;
  Rng rng(5);
  const PatchGrid grid{3, 4};
  const std::size_t d = 8, n = grid.tokens();
  const auto q0 = TensorD::randn({1, d}, rng), k0 = TensorD::randn({1, d}, rng);
  TensorD q({1, 1, n, d}), k({1, 1, n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      q[i * d + c] = q0[c];
      k[i * d + c] = k0[c];
    }
  const auto logits = matmul_nt(rope2d_axial(q, grid), rope2d_axial(k, grid));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
          const long dx1 = long(grid.x(j)) - long(grid.x(i)), dy1 = long(grid.y(j)) - long(grid.y(i));
          const long dx2 = long(grid.x(b)) - long(grid.x(a)), dy2 = long(grid.y(b)) - long(grid.y(a));
          if (dx1 == dx2 && dy1 == dy2) worst = std::max(worst, std::abs(logits[i * n + j] - logits[a * n + b]));
        }
  return {violation(worst, 1e-12), "3x4 grid, all equal-offset pairs"};
}

// ---------------------------------------------------------------------------
// SaPE2

/// Integer-logit interpolation path against explicitly built embeddings.
inline Outcome check_path_equivalence(std::size_t instances = 100) {
  auto acc = fresh(1e-12);
  const std::size_t widths[] = {2, 4, 8}, maxes[] = {2, 4, 8};
  for (std::uint64_t seed = 0; seed < instances; ++seed) {
    const std::size_t w = widths[seed % 3], m = maxes[(seed / 3) % 3];
    const SapeMode mode = (seed / 9) % 2 ? SapeMode::query : SapeMode::key;
    const std::size_t rows = 2 + seed % 5;
    auto in = oracle::make_instance(1000 + seed, {.batch = 1, .heads = 2, .rows = rows, .cols = w, .dim = 8,
                                                  .max_x = m, .max_y = m, .mode = mode, .qk_std = 1.5});
    for (Axis axis : {Axis::x, Axis::y}) {
      const auto fast = build_axis_vectors(in.q, in.k, axis == Axis::x ? in.table_x : in.table_y, in.grid, axis, in.opts);
      absorb(acc, oracle::compare(fast.values(), oracle::direct_sape_vectors(in.problem, axis), 1e-12, fast.shape()));
    }
  }
  return {acc, std::to_string(instances) + " instances, W in {2,4,8}, M in {2,4,8}, query and key"};
}

inline Outcome check_brute_force_bias(std::size_t seeds = 20) {
  auto acc = fresh(1e-10);
  for (std::size_t side : {2, 4, 8}) {
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      auto in = oracle::make_instance(2000 + 100 * side + seed,
                                      {.batch = 1, .heads = 2, .rows = side, .cols = side, .dim = 8,
                                       .mode = seed % 2 ? SapeMode::query : SapeMode::key});
      const auto fast = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
      absorb(acc, oracle::compare(fast.values(), oracle::brute_force_bias(in.problem), 1e-10, fast.shape()));
    }
  }
  return {acc, "2x2, 4x4, 8x8 grids, " + std::to_string(seeds) + " seeds each"};
}

/// Gate logits pinned at +50: positions become clamped suffix counts.
inline Outcome check_saturated_positions() {
  auto acc = fresh(1e-9);
  for (std::size_t w : {2, 4, 8}) {
    for (std::size_t m : {2, 4, 8}) {
      for (ClampMode clamp : {ClampMode::code, ClampMode::text}) {
        auto in = oracle::make_instance(w * 10 + m, {.rows = 3, .cols = w, .dim = 4});
        for (std::size_t i = 0; i < in.q.numel(); ++i) in.q[i] = in.k[i] = i % 4 == 0 ? 1.0 : 0.0;
        const auto g = compute_gates(axis_slices(in.q, in.grid, Axis::x), axis_slices(in.k, in.grid, Axis::x), 50.0);
        const double bound = clamp_bound(m, clamp);
        const auto p = accumulate_positions(g, bound);
        std::vector<double> expect(p.numel());
        for (std::size_t r = 0; r < p.numel() / w; ++r)
          for (std::size_t j = 0; j < w; ++j) expect[r * w + j] = std::min(static_cast<double>(w - j), bound);
        absorb(acc, oracle::compare(p.values(), expect, 1e-9, p.shape()));
      }
    }
  }
  return {acc, "W, M in {2,4,8}, both clamp bounds"};
}

inline Outcome check_sape2_gradients() {
  auto acc = fresh(1e-6);
  auto in = oracle::make_instance(2024, {.batch = 1, .heads = 2, .rows = 4, .cols = 4, .dim = 8, .max_x = 4, .max_y = 4});
  const auto grid = in.grid;
  const auto opts = in.opts;
  const char* names[] = {"q", "k", "table_x", "table_y"};
  std::string note = "4x4 grid, d=8, M=4, step 1e-6:";
  const auto reports = oracle::gradient_check(
      [grid, opts](const std::vector<TensorD>& t) {
        return sum(sape2_bias(t[0], t[1], PositionTable<double>{t[2]}, PositionTable<double>{t[3]}, grid, opts));
      },
      {in.q, in.k, in.table_x.emb, in.table_y.emb}, 1e-6, 1e-6);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    absorb(acc, reports[i]);
    std::ostringstream s;
    s << " " << names[i] << " " << std::scientific << std::setprecision(1) << reports[i].max_rel_err;
    note += s.str();
  }
  return {acc, note};
}

/// Symmetry, zero diagonal and non-negativity exactly; the triangle
/// inequality on sampled triples within 1e-9.
inline Outcome check_metric_axioms(std::size_t seeds = 10, std::size_t triples = 1000) {
  double exact = 0.0, triangle = 0.0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    auto in = oracle::make_instance(3000 + seed, {.batch = 1, .heads = 2, .rows = 4, .cols = 4, .dim = 8});
    const auto b = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
    const std::size_t n = in.grid.tokens();
    Rng rng(seed);
    for (std::size_t h = 0; h < 2; ++h) {
      const double* f = b.values().data() + h * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        exact = std::max(exact, std::abs(f[i * n + i]));
        for (std::size_t j = 0; j < n; ++j) {
          exact = std::max(exact, std::abs(f[i * n + j] - f[j * n + i]));
          exact = std::max(exact, -f[i * n + j]);
        }
      }
      for (std::size_t t = 0; t < triples; ++t) {
        const auto i = rng.below(n), j = rng.below(n), m = rng.below(n);
        triangle = std::max(triangle, f[i * n + j] - f[i * n + m] - f[m * n + j]);
      }
    }
  }
  std::ostringstream s;
  s << "symmetry/diagonal/sign violation " << exact << ", triangle excess " << triangle;
  auto r = violation(triangle, 1e-9);
  if (exact != 0.0) {
    r = violation(exact, 0.0);
  }
  return {r, s.str()};
}

inline Outcome check_gates_and_positions() {
  double worst = 0.0;
  std::size_t bad = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto in = oracle::make_instance(4000 + seed, {.batch = 2, .heads = 2, .rows = 4, .cols = 6, .dim = 8, .qk_std = 3.0});
    for (Axis axis : {Axis::x, Axis::y}) {
      const std::size_t len = axis == Axis::x ? 6 : 4;
      const auto g = compute_gates(axis_slices(in.q, in.grid, axis), axis_slices(in.k, in.grid, axis),
                                   1.0 / std::sqrt(8.0));
      for (double v : g.values()) bad += !(v > 0.0 && v < 1.0);
      const double bound = clamp_bound(len, ClampMode::code);
      const auto p = accumulate_positions(g, bound);
      for (std::size_t r = 0; r < p.numel() / len; ++r)
        for (std::size_t m = 0; m < len; ++m) {
          const double v = p[r * len + m];
          worst = std::max({worst, v - bound, -v});
          if (m + 1 < len) worst = std::max(worst, p[r * len + m + 1] - v);
        }
    }
  }
  auto r = violation(worst, 0.0);
  if (bad) r.pass = false;
  return {r, std::to_string(bad) + " gates outside (0,1); positions checked for order and bound"};
}

inline Outcome check_attention_rows() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto in = oracle::make_instance(5000 + seed, {.batch = 2, .heads = 2, .rows = 4, .cols = 4, .dim = 8, .qk_std = 2.0});
    const auto bias = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
    for (double sign : {1.0, -1.0}) {
      const auto w = attention_weights(in.q, in.k, bias, {BiasPlacement::pre_scale, sign});
      const std::size_t n = in.grid.tokens();
      for (std::size_t r = 0; r < w.numel() / n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += w[r * n + j];
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
  }
  return {violation(worst, 1e-6), "SaPE2-biased softmax rows"};
}

/// A SaPE2 model with zeroed tables against the same backbone without any
/// in-attention encoding, at 64-bit.
inline Outcome check_zero_table_model() {
  auto acc = fresh(1e-10);
  for (auto pooling : {Pooling::cls, Pooling::mean}) {
    VitConfig cs;
    cs.image_size = 16;
    cs.hidden_dim = 32;
    cs.depth = 2;
    cs.heads = 4;
    cs.mlp_ratio = 2;
    cs.num_classes = 5;
    cs.pooling = pooling;
    cs.pe = "sape2";
    auto cn = cs;
    cn.pe = "none";
    VisionTransformer<double> with(cs, 8), without(cn, 8);
    for (auto& b : with.blocks()) {
      std::fill(b.pe.sape_x.emb.values().begin(), b.pe.sape_x.emb.values().end(), 0.0);
      std::fill(b.pe.sape_y.emb.values().begin(), b.pe.sape_y.emb.values().end(), 0.0);
    }
    Rng rng(9);
    const auto x = TensorD::uniform({3, 16, 16, 3}, rng, -2.0, 2.0);
    auto r = oracle::compare(with.forward(x).values(), without.forward(x).values(), 1e-10);
    r.pass = r.max_abs_err <= 1e-10;
    absorb(acc, r);
  }
  return {acc, "cls and mean pooling, absolute error"};
}

inline constexpr const char* kGoldenFile = "sape2_bias_2x2_d4_m2.txt";

/// Stored 2x2 field (seed 20240601, d=4, M=2) against both the oracle and
/// the fast path.
inline Outcome check_golden(const std::filesystem::path& dir) {
  const auto path = dir / kGoldenFile;
  if (!std::filesystem::exists(path)) return {violation(INFINITY, 0.0), "missing " + path.string()};
  const auto golden = oracle::read_golden(path);
  const auto seed = std::stoull(golden.header.at("seed"));
  auto in = oracle::make_instance(seed, {.rows = 2, .cols = 2, .dim = 4, .max_x = 2, .max_y = 2});
  if (golden.values.size() != 16) return {violation(INFINITY, 0.0), "golden file has wrong length"};
  auto acc = fresh(1e-10);
  absorb(acc, oracle::compare(oracle::brute_force_bias(in.problem), golden.values, 1e-10));
  const auto fast = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
  absorb(acc, oracle::compare(fast.values(), golden.values, 1e-10, fast.shape()));
  return {acc, path.filename().string()};
}

// ---------------------------------------------------------------------------

inline std::vector<Check> default_checks(const std::filesystem::path& golden_dir) {
  return {
      {"numeric", "matmul vs triple loop", [] { return check_matmul(); }},
      {"numeric", "pairwise_l2 vs scalar loop", [] { return check_pairwise_l2(); }},
      {"numeric", "attention vs scalar loop", [] { return check_attention(); }},
      {"numeric", "kernel gradients vs central differences", [] { return check_kernel_gradients(); }},
      {"pe-baselines", "cope vs scalar loop", [] { return check_cope(); }},
      {"pe-baselines", "rope2d logits depend on offset only", [] { return check_rope2d(); }},
      {"sape2", "interpolated path vs direct embeddings", [] { return check_path_equivalence(); }},
      {"sape2", "bias vs brute force", [] { return check_brute_force_bias(); }},
      {"sape2", "saturated gates give suffix counts", [] { return check_saturated_positions(); }},
      {"sape2", "bias gradients vs central differences", [] { return check_sape2_gradients(); }},
      {"sape2", "bias field metric axioms", [] { return check_metric_axioms(); }},
      {"sape2", "gates in (0,1), positions monotone and bounded", [] { return check_gates_and_positions(); }},
      {"sape2", "attention rows sum to one", [] { return check_attention_rows(); }},
      {"sape2", "zero-table model equals no-PE model", [] { return check_zero_table_model(); }},
      {"sape2", "golden 2x2 field", [golden_dir] { return check_golden(golden_dir); }},
  };
}

/// Runs every check, converting exceptions into failures.
inline CheckResult run_check(const Check& c) {
  CheckResult r{c.module, c.name, {}, 0.0};
  const auto start = std::chrono::steady_clock::now();
  try {
    r.outcome = c.run();
  } catch (const std::exception& e) {
    r.outcome = {violation(INFINITY, 0.0), std::string("exception: ") + e.what()};
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline void print_header(std::ostream& os) {
  os << std::left << std::setw(13) << "module" << std::setw(48) << "check" << std::setw(7) << "result"
     << std::setw(11) << "max_abs" << std::setw(11) << "max_rel" << std::setw(10) << "tol" << std::setw(9) << "seconds"
     << "note\n";
}

inline void print_row(std::ostream& os, const CheckResult& r) {
  const auto& rep = r.outcome.report;
  os << std::left << std::setw(13) << r.module << std::setw(48) << r.name << std::setw(7)
     << (r.pass() ? "pass" : "FAIL") << std::scientific << std::setprecision(2) << std::setw(11) << rep.max_abs_err
     << std::setw(11) << rep.max_rel_err << std::setw(10) << rep.tolerance << std::fixed << std::setprecision(3)
     << std::setw(9) << r.seconds << std::defaultfloat << r.outcome.note << "\n";
}

/// Runs the checks, printing a table row as each finishes. Returns the
/// number of failures.
inline std::size_t run_suite(const std::vector<Check>& checks, std::ostream& os,
                             std::vector<CheckResult>* results = nullptr) {
  print_header(os);
  std::size_t failures = 0;
  for (const auto& c : checks) {
    const auto r = run_check(c);
    print_row(os, r);
    os.flush();
    failures += !r.pass();
    if (results) results->push_back(r);
  }
  os << (failures ? std::to_string(failures) + " of " + std::to_string(checks.size()) + " checks failed"
                  : "all " + std::to_string(checks.size()) + " checks passed")
     << "\n";
  return failures;
}

}  // namespace sape2::selftest
