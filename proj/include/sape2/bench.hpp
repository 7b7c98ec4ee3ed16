#pragma once

// Wall-time scaling of the SaPE2 bias over square patch grids, with an
// analytic count of the intermediate arrays it allocates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sape2/sape2.hpp"

namespace sape2 {

struct BenchOptions {
  std::vector<std::size_t> sizes{16, 64, 256, 1024};  // token counts N, perfect squares
  std::size_t dim = 16;                               // head dim of the tiny ViT (64 / 4)
  std::size_t heads = 4;
  std::size_t batch = 32;  // images per call, the tiny config's training batch
  std::size_t repeats = 5;
  int threads = 1;
  double min_sample_seconds = 0.02;  // each timed sample loops until at least this long
  std::uint64_t seed = 0;
};

/// Values held per head and image by the bias computation on an H x W grid.
struct MemoryEstimate {
  std::size_t gates = 0;      // N*W + N*H
  std::size_t positions = 0;  // N*W + N*H
  std::size_t vectors = 0;    // N*W + N*H
  std::size_t bias = 0;       // 2*N^2: b^x and b^y
  std::size_t total() const { return gates + positions + vectors + bias; }
  double bias_fraction() const { return static_cast<double>(bias) / static_cast<double>(total()); }
};

inline MemoryEstimate analytic_memory(const PatchGrid& g) {
  const std::size_t n = g.tokens(), per_axis = n * g.cols + n * g.rows;
  return {per_axis, per_axis, per_axis, 2 * n * n};
}

struct BenchRow {
  std::size_t tokens = 0;
  PatchGrid grid;
  std::size_t iterations = 0;  // calls per timed sample
  double min = 0, median = 0, max = 0;  // seconds per call
  MemoryEstimate memory;
};

struct BenchReport {
  BenchOptions options;
  int threads_used = 1;
  std::vector<BenchRow> rows;
  double slope = 0.0;  // least-squares slope of log(median) against log(N)
};

inline PatchGrid square_grid(std::size_t tokens) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (tokens == 0 || side * side != tokens) {
    throw std::invalid_argument("bench size " + std::to_string(tokens) + " is not a square grid");
  }
  return {side, side};
}

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw std::invalid_argument("slope needs at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Times the forward bias (no autograd recording) at each size.
inline BenchReport run_bench(const BenchOptions& o, std::ostream* log = nullptr) {
  if (o.repeats == 0 || o.batch == 0) throw std::invalid_argument("repeats and batch must be positive");
  Eigen::setNbThreads(o.threads);
  BenchReport report{o, Eigen::nbThreads(), {}, 0.0};
  NoGradGuard guard;
  using clock = std::chrono::steady_clock;
  for (std::size_t n : o.sizes) {
    const auto grid = square_grid(n);
    Rng rng(o.seed + n);
    const auto q = Tensor<float>::randn({o.batch, o.heads, n, o.dim}, rng);
    const auto k = Tensor<float>::randn({o.batch, o.heads, n, o.dim}, rng);
    const auto tx = PositionTable<float>::init(o.dim, grid.cols, rng, 1.0);
    const auto ty = PositionTable<float>::init(o.dim, grid.rows, rng, 1.0);
    auto call = [&] { return sape2_bias(q, k, tx, ty, grid).values()[0]; };

    // calibrate the loop count from one warm call
    auto t0 = clock::now();
    volatile float sink = call();
    const double once = std::max(std::chrono::duration<double>(clock::now() - t0).count(), 1e-7);
    const auto iters = static_cast<std::size_t>(std::max(1.0, std::ceil(o.min_sample_seconds / once)));

    std::vector<double> samples;
    for (std::size_t r = 0; r < o.repeats; ++r) {
      t0 = clock::now();
      for (std::size_t i = 0; i < iters; ++i) sink = call();
      samples.push_back(std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(iters));
    }
    (void)sink;
    std::sort(samples.begin(), samples.end());
    BenchRow row{n, grid, iters, samples.front(), samples[samples.size() / 2], samples.back(), analytic_memory(grid)};
    if (samples.size() % 2 == 0) row.median = 0.5 * (samples[samples.size() / 2 - 1] + samples[samples.size() / 2]);
    if (log) {
      *log << "N=" << n << " (" << grid.rows << "x" << grid.cols << ")  median " << std::scientific
           << std::setprecision(3) << row.median << " s" << std::defaultfloat << "\n";
    }
    report.rows.push_back(row);
  }
  if (report.rows.size() >= 2) {
    std::vector<double> xs, ys;
    for (const auto& r : report.rows) {
      xs.push_back(static_cast<double>(r.tokens));
      ys.push_back(r.median);
    }
    report.slope = loglog_slope(xs, ys);
  }
  return report;
}

inline void write_bench_csv(std::ostream& os, const BenchReport& r) {
  os << "# sape2-bench v1 threads=" << r.threads_used << " dim=" << r.options.dim << " heads=" << r.options.heads
     << " batch=" << r.options.batch << " repeats=" << r.options.repeats << " slope=" << std::setprecision(6) << r.slope << "\n";
  os << "tokens,grid,iterations,min_seconds,median_seconds,max_seconds,gate_values,position_values,vector_values,"
        "bias_values,bias_fraction\n";
  for (const auto& row : r.rows) {
    const auto& m = row.memory;
    os << row.tokens << ',' << row.grid.rows << 'x' << row.grid.cols << ',' << row.iterations << ','
       << std::setprecision(6) << row.min << ',' << row.median << ',' << row.max << ',' << m.gates << ','
       << m.positions << ',' << m.vectors << ',' << m.bias << ',' << std::setprecision(4) << m.bias_fraction()
       << "\n";
  }
}

}  // namespace sape2
