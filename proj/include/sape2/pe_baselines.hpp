#pragma once

// Comparison position encodings: sinusoidal and learnable absolute tables,
// 2D relative bias tables, axial 2D rotary embedding, and 1D contextual
// (gated, causal) positions.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "sape2/grid.hpp"
#include "sape2/ops.hpp"
#include "sape2/sape2.hpp"
#include "sape2/tensor.hpp"

namespace sape2 {

/// Sinusoidal code for one position: sin at even dims, cos at odd dims, with
/// frequency 10000^(-2j/dim) for pair j.
inline std::vector<double> sinusoidal_ape(std::size_t position, std::size_t dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_ape: dim must be even, got " + std::to_string(dim));
  std::vector<double> out(dim);
  for (std::size_t j = 0; j < dim / 2; ++j) {
    const double angle =
        static_cast<double>(position) / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(dim));
    out[2 * j] = std::sin(angle);
    out[2 * j + 1] = std::cos(angle);
  }
  return out;
}

/// [tokens, dim] table of sinusoidal codes over raster token indices.
template <typename T>
Tensor<T> sinusoidal_table(std::size_t tokens, std::size_t dim) {
  Tensor<T> t({tokens, dim});
  for (std::size_t i = 0; i < tokens; ++i) {
    const auto row = sinusoidal_ape(i, dim);
    for (std::size_t j = 0; j < dim; ++j) t[i * dim + j] = static_cast<T>(row[j]);
  }
  return t;
}

/// Adds a [N, D] position table to [B, N, D] token embeddings.
template <typename T>
Tensor<T> apply_ape(const Tensor<T>& tokens, const Tensor<T>& table) {
  if (tokens.rank() != 3 || table.rank() != 2 || tokens.dim(1) != table.dim(0) || tokens.dim(2) != table.dim(1)) {
    throw ShapeError("APE table " + shape_str(table.shape()) + " does not match tokens " + shape_str(tokens.shape()));
  }
  return add(tokens, table);
}

/// Per-head bias tables indexed by the clipped-free axis offsets.
template <typename T>
struct RpeTable {
  Tensor<T> x;  // [heads, 2W-1], index dx + W - 1
  Tensor<T> y;  // [heads, 2H-1], index dy + H - 1

  static RpeTable zeros(std::size_t heads, const PatchGrid& g) {
    return {Tensor<T>({heads, 2 * g.cols - 1}), Tensor<T>({heads, 2 * g.rows - 1})};
  }
  static RpeTable init(std::size_t heads, const PatchGrid& g, Rng& rng, double std = 0.02) {
    return {Tensor<T>::trunc_normal({heads, 2 * g.cols - 1}, rng, std),
            Tensor<T>::trunc_normal({heads, 2 * g.rows - 1}, rng, std)};
  }
  std::size_t heads() const { return x.dim(0); }
};

/// bias[h, i, j] = r_x[h, x_i - x_j] + r_y[h, y_i - y_j], shape [heads, N, N].
template <typename T>
Tensor<T> rpe_bias(const PatchGrid& grid, const RpeTable<T>& table) {
  const std::size_t heads = table.heads(), n = grid.tokens();
  const std::size_t wx = 2 * grid.cols - 1, wy = 2 * grid.rows - 1;
  if (table.x.shape() != Shape{heads, wx} || table.y.shape() != Shape{heads, wy}) {
    throw ShapeError("RPE tables " + shape_str(table.x.shape()) + "/" + shape_str(table.y.shape()) +
                     " do not cover a " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  auto ix = [grid](std::size_t i, std::size_t j) { return grid.x(i) + grid.cols - 1 - grid.x(j); };
  auto iy = [grid](std::size_t i, std::size_t j) { return grid.y(i) + grid.rows - 1 - grid.y(j); };
  std::vector<T> out(heads * n * n);
  const auto& xv = table.x.values();
  const auto& yv = table.y.values();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out[(h * n + i) * n + j] = xv[h * wx + ix(i, j)] + yv[h * wy + iy(i, j)];
  return Tensor<T>::make_result({heads, n, n}, std::move(out), {table.x, table.y},
                                [=](detail::Node<T>& self) {
                                  auto* gx = parent_grad(self, 0);
                                  auto* gy = parent_grad(self, 1);
                                  for (std::size_t h = 0; h < heads; ++h)
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < n; ++j) {
                                        const T g = self.grad[(h * n + i) * n + j];
                                        if (gx) (*gx)[h * wx + ix(i, j)] += g;
                                        if (gy) (*gy)[h * wy + iy(i, j)] += g;
                                      }
                                });
}

/// Rotation angles [N, d/2] for axial 2D RoPE: the first half of the head
/// dims turns with the x coordinate, the second half with y.
inline std::vector<double> rope2d_angles(const PatchGrid& grid, std::size_t head_dim) {
  if (head_dim % 4 != 0) {
    throw std::invalid_argument("rope2d_axial: head_dim must be divisible by 4, got " + std::to_string(head_dim));
  }
  const std::size_t axis_dim = head_dim / 2, pairs = axis_dim / 2;
  std::vector<double> angles(grid.tokens() * head_dim / 2);
  for (std::size_t i = 0; i < grid.tokens(); ++i) {
    for (std::size_t t = 0; t < pairs; ++t) {
      const double theta = std::pow(10000.0, -static_cast<double>(t) / static_cast<double>(pairs));
      angles[i * head_dim / 2 + t] = static_cast<double>(grid.x(i)) * theta;
      angles[i * head_dim / 2 + pairs + t] = static_cast<double>(grid.y(i)) * theta;
    }
  }
  return angles;
}

/// Applies axial 2D RoPE to [..., N, d] queries or keys.
template <typename T>
Tensor<T> rope2d_axial(const Tensor<T>& qk, const PatchGrid& grid) {
  if (qk.rank() < 2 || qk.dim(-2) != grid.tokens()) {
    throw ShapeError("rope2d_axial: input " + shape_str(qk.shape()) + " vs grid of " + std::to_string(grid.tokens()) +
                     " tokens");
  }
  const auto a = rope2d_angles(grid, qk.dim(-1));
  return rotate_pairs(qk, std::vector<T>(a.begin(), a.end()));
}

/// Lower-triangular (j <= i) mask, [T, T].
template <typename T>
Tensor<T> causal_mask(std::size_t tokens) {
  Tensor<T> m({tokens, tokens});
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * tokens + j] = T{1};
  return m;
}

/// Contextual positions from gates: p[i, j] = sum_{k=j..i} g[i, k] for j <= i,
/// zero above the diagonal. gates: [..., T, T].
template <typename T>
Tensor<T> cope_positions(const Tensor<T>& gates) {
  const auto mask = causal_mask<T>(gates.dim(-1));
  return mul(reverse_cumsum(mul(gates, mask), -1), mask);
}

/// Causal 1D contextual position bias [..., T, T]: q_i . e[p_ij] for j <= i,
/// zero otherwise. Positions are clamped to the table's max position M.
template <typename T>
Tensor<T> cope1d(const Tensor<T>& q, const Tensor<T>& k, const PositionTable<T>& table, T gate_scale = T{1}) {
  if (q.shape() != k.shape() || q.rank() < 2) {
    throw ShapeError("cope1d: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
  }
  if (table.head_dim() != q.dim(-1)) {
    throw ShapeError("cope1d: table head_dim " + std::to_string(table.head_dim()) + " vs " + std::to_string(q.dim(-1)));
  }
  const auto gates = sigmoid(scale(matmul_nt(q, k), gate_scale));
  const auto pos = clamp_max(cope_positions(gates), static_cast<T>(table.max_position()));
  const auto mask = causal_mask<T>(q.dim(-2));
  return mul(interpolate_positions(matmul(q, table.emb), pos), mask);
}

}  // namespace sape2
