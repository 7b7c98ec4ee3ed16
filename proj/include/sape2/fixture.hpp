#pragma once

// Seeded SaPE2 instances held both as tensors and as oracle buffers, and a
// finite-difference gradient check for tensor functions.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sape2/oracles.hpp"
#include "sape2/sape2.hpp"

namespace sape2::oracle {

/// One seeded SaPE2 instance, held both as tensors and as the oracle's flat
/// buffers (identical values).
struct SapeInstance {
  PatchGrid grid;
  Tensor<double> q, k;
  PositionTable<double> table_x, table_y;
  SapeOptions opts;
  SapeProblem problem;

  void sync_problem() {
    problem.q.assign(q.values().begin(), q.values().end());
    problem.k.assign(k.values().begin(), k.values().end());
    problem.table_x.assign(table_x.emb.values().begin(), table_x.emb.values().end());
    problem.table_y.assign(table_y.emb.values().begin(), table_y.emb.values().end());
  }
};

struct InstanceSpec {
  std::size_t batch = 1, heads = 1, rows = 2, cols = 2, dim = 4;
  std::size_t max_x = 0, max_y = 0;  // 0: axis extent
  SapeMode mode = SapeMode::key;
  ClampMode clamp = ClampMode::code;
  double qk_std = 1.0;
  double table_std = 1.0;
};

inline SapeInstance make_instance(std::uint64_t seed, const InstanceSpec& s) {
  Rng rng(seed);
  SapeInstance in;
  in.grid = {s.rows, s.cols};
  const std::size_t mx = s.max_x ? s.max_x : s.cols, my = s.max_y ? s.max_y : s.rows;
  in.q = Tensor<double>::randn({s.batch, s.heads, s.rows * s.cols, s.dim}, rng, s.qk_std);
  in.k = Tensor<double>::randn({s.batch, s.heads, s.rows * s.cols, s.dim}, rng, s.qk_std);
  in.table_x = {Tensor<double>::randn({s.dim, mx + 1}, rng, s.table_std)};
  in.table_y = {Tensor<double>::randn({s.dim, my + 1}, rng, s.table_std)};
  in.opts.mode = s.mode;
  in.opts.clamp = s.clamp;
  auto& p = in.problem;
  p.batch = s.batch;
  p.heads = s.heads;
  p.rows = s.rows;
  p.cols = s.cols;
  p.dim = s.dim;
  p.max_x = mx;
  p.max_y = my;
  p.gate_scale = in.opts.resolved_scale(s.dim);
  p.mode = s.mode;
  p.clamp = s.clamp;
  in.sync_problem();
  return in;
}

/// Compares backward() against central differences for a scalar function of
/// the given leaves. Returns one report per leaf.
inline std::vector<OracleReport> gradient_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f, std::vector<Tensor<double>> leaves,
    double tolerance = 1e-6, double step = 1e-6) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  f(leaves).backward();
  std::vector<std::span<double>> spans;
  for (auto& l : leaves) spans.push_back(l.data());
  const auto numeric = finite_difference_grad(
      [&] {
        NoGradGuard guard;
        return f(leaves).item();
      },
      spans, step);
  std::vector<OracleReport> reports;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    std::vector<double> analytic(leaves[i].grad().begin(), leaves[i].grad().end());
    reports.push_back(compare(analytic, numeric[i], tolerance, leaves[i].shape()));
  }
  return reports;
}

}  // namespace sape2::oracle
