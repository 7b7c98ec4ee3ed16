#pragma once

// Semantic-aware 2D position encoding: per-axis gated position accumulation,
// interpolated position logits, per-patch axis vectors, and the pairwise
// Euclidean attention bias built from them.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "sape2/grid.hpp"
#include "sape2/ops.hpp"
#include "sape2/tensor.hpp"

namespace sape2 {

/// Learnable embeddings e[0..M] for one axis, stored [head_dim, M+1] so that
/// q @ table gives the logits at every integer position in one product.
template <typename T>
struct PositionTable {
  Tensor<T> emb;

  static PositionTable zeros(std::size_t head_dim, std::size_t max_position) {
    check(head_dim, max_position);
    return {Tensor<T>({head_dim, max_position + 1})};
  }

  static PositionTable init(std::size_t head_dim, std::size_t max_position, Rng& rng, double std = 0.02) {
    check(head_dim, max_position);
    return {Tensor<T>::trunc_normal({head_dim, max_position + 1}, rng, std)};
  }

  std::size_t head_dim() const { return emb.dim(0); }
  std::size_t max_position() const { return emb.dim(1) - 1; }

 private:
  static void check(std::size_t head_dim, std::size_t max_position) {
    if (head_dim == 0) throw std::invalid_argument("position table needs head_dim >= 1");
    if (max_position < 1) throw std::invalid_argument("position table needs max position M >= 1");
  }
};

struct SapeOptions {
  SapeMode mode = SapeMode::key;
  ClampMode clamp = ClampMode::code;
  // gate logit multiplier; 0 selects 1/sqrt(head_dim)
  double gate_scale = 0.0;

  double resolved_scale(std::size_t head_dim) const {
    return gate_scale > 0.0 ? gate_scale : 1.0 / std::sqrt(static_cast<double>(head_dim));
  }
};

/// sigmoid(scale * q k^T) for every pair inside each row (or column) slice.
///
/// q_axis, k_axis: [..., L, d]. Returns [..., L, L] with entry (i, j) the gate
/// of patch j as seen from patch i. No causal mask is applied.
template <typename T>
Tensor<T> compute_gates(const Tensor<T>& q_axis, const Tensor<T>& k_axis, T gate_scale) {
  if (q_axis.shape() != k_axis.shape()) {
    throw ShapeError("compute_gates: q " + shape_str(q_axis.shape()) + " vs k " + shape_str(k_axis.shape()));
  }
  return sigmoid(scale(matmul_nt(q_axis, k_axis), gate_scale));
}

/// Relative positions as suffix sums of gates over the target index, clamped.
///
/// p[..., i, m] = min(sum_{j >= m} g[..., i, j], bound).
template <typename T>
Tensor<T> accumulate_positions(const Tensor<T>& gates, T bound) {
  return clamp_max(reverse_cumsum(gates, -1), bound);
}

/// Position logits at real positions from logits at the integer knots.
///
/// z_int: [..., L, M+1] with z_int[..., i, p] = proj_i . e[p]. positions:
/// [..., L, L]. Matches dotting the interpolated embedding directly, since
/// the dot product is linear.
template <typename T>
Tensor<T> interpolate_logits(const Tensor<T>& z_int, const Tensor<T>& positions) {
  return interpolate_positions(z_int, positions);
}

/// Splits [B, h, N, d] into per-axis slices: rows [B, h, H, W, d] for the x
/// axis, columns [B, h, W, H, d] for the y axis.
template <typename T>
Tensor<T> axis_slices(const Tensor<T>& x, const PatchGrid& grid, Axis axis) {
  if (x.rank() != 4 || x.dim(2) != grid.tokens()) {
    throw ShapeError("SaPE2 input " + shape_str(x.shape()) + " does not match a " + std::to_string(grid.rows) +
                     "x" + std::to_string(grid.cols) + " grid (expected [B, heads, " +
                     std::to_string(grid.tokens()) + ", d])");
  }
  const std::size_t b = x.dim(0), h = x.dim(1), d = x.dim(3);
  auto rows = reshape(x, {b, h, grid.rows, grid.cols, d});
  if (axis == Axis::x) return rows;
  return permute(rows, {0, 1, 3, 2, 4});
}

/// Per-patch axis vectors [B, h, N, L] (L = W for x, H for y).
///
/// Gates always come from q and k; the mode only picks which projection
/// reads the table.
template <typename T>
Tensor<T> build_axis_vectors(const Tensor<T>& q, const Tensor<T>& k, const PositionTable<T>& table,
                             const PatchGrid& grid, Axis axis, const SapeOptions& opts = {}) {
  if (q.shape() != k.shape()) {
    throw ShapeError("build_axis_vectors: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
  }
  const std::size_t d = q.dim(-1);
  if (table.head_dim() != d) {
    throw ShapeError("position table head_dim " + std::to_string(table.head_dim()) + " vs query dim " +
                     std::to_string(d));
  }
  const auto qs = axis_slices(q, grid, axis);
  const auto ks = axis_slices(k, grid, axis);
  const auto gates = compute_gates(qs, ks, static_cast<T>(opts.resolved_scale(d)));
  const auto pos =
      accumulate_positions(gates, static_cast<T>(clamp_bound(table.max_position(), opts.clamp)));
  Tensor<T> proj;
  switch (opts.mode) {
    case SapeMode::query: proj = qs; break;
    case SapeMode::key: proj = ks; break;
    case SapeMode::both: proj = add(qs, ks); break;
  }
  const auto z = interpolate_logits(matmul(proj, table.emb), pos);  // [B, h, A, L, L]
  const std::size_t b = q.dim(0), h = q.dim(1), n = grid.tokens();
  if (axis == Axis::x) return reshape(z, {b, h, n, grid.cols});
  // (x, y_i, m) -> (y_i, x, m) so the token index is raster ordered
  return reshape(permute(z, {0, 1, 3, 2, 4}), {b, h, n, grid.rows});
}

/// Pairwise Euclidean distance between axis vectors: [B, h, N, L] -> [B, h, N, N].
template <typename T>
Tensor<T> axis_bias(const Tensor<T>& vectors) {
  return pairwise_l2(vectors);
}

/// Full SaPE2 bias b^x + b^y, shape [B, h, N, N].
template <typename T>
Tensor<T> sape2_bias(const Tensor<T>& q, const Tensor<T>& k, const PositionTable<T>& table_x,
                     const PositionTable<T>& table_y, const PatchGrid& grid, const SapeOptions& opts = {}) {
  return pairwise_l2_sum(build_axis_vectors(q, k, table_x, grid, Axis::x, opts),
                         build_axis_vectors(q, k, table_y, grid, Axis::y, opts));
}

}  // namespace sape2
