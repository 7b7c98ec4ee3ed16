#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "sape2/grid.hpp"
#include "sape2/ops.hpp"
#include "sape2/pe_baselines.hpp"
#include "sape2/sape2.hpp"

namespace sape2 {

/// Position encodings that act inside attention.
enum class AttentionPE { none, rpe, rope2d, cope, sape2 };

/// Where the additive bias joins the logits relative to the 1/sqrt(d) factor.
enum class BiasPlacement { pre_scale, post_scale };

struct AttentionOptions {
  BiasPlacement placement = BiasPlacement::pre_scale;
  double bias_sign = 1.0;
};

/// Parameters of the in-attention encoding of one layer.
template <typename T>
struct LayerPE {
  AttentionPE kind = AttentionPE::none;
  PositionTable<T> sape_x;
  PositionTable<T> sape_y;
  SapeOptions sape;
  RpeTable<T> rpe;
  PositionTable<T> cope;
};

/// softmax(logits) with logits = (q k^T + s b) / sqrt(d) (pre-scale) or
/// q k^T / sqrt(d) + s b (post-scale). bias may be undefined; a bias over
/// fewer tokens than q covers the trailing ones (leading tokens get zero).
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& bias,
                            const AttentionOptions& opts = {}) {
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(q.dim(-1)));
  const T sign = static_cast<T>(opts.bias_sign);
  const T bias_scale = opts.placement == BiasPlacement::pre_scale ? sign * inv_sqrt_d : sign;
  const std::size_t leading = bias.defined() ? q.dim(-2) - bias.dim(-1) : 0;
  return attention_softmax(q, k, bias, inv_sqrt_d, bias_scale, leading);
}

template <typename T>
Tensor<T> scaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias,
                           const AttentionOptions& opts = {}) {
  return matmul(attention_weights(q, k, bias, opts), v);
}

/// Bias field of a bias-type encoding over patch tokens, [B, h, N, N] (RPE
/// gives [h, N, N]). Undefined for none and rope2d.
template <typename T>
Tensor<T> pe_bias(const Tensor<T>& q, const Tensor<T>& k, const LayerPE<T>& pe, const PatchGrid& grid) {
  switch (pe.kind) {
    case AttentionPE::sape2:
      return sape2_bias(q, k, pe.sape_x, pe.sape_y, grid, pe.sape);
    case AttentionPE::rpe:
      return rpe_bias(grid, pe.rpe);
    case AttentionPE::cope:
      return cope1d(q, k, pe.cope, static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(-1)))));
    case AttentionPE::none:
    case AttentionPE::rope2d:
      break;
  }
  return {};
}

/// Multi-head attention [B, h, T, d] with an in-attention position encoding.
///
/// The first `leading` tokens (a class token) carry no position: they are not
/// rotated and their bias rows and columns are zero.
template <typename T>
Tensor<T> attention_with_pe(Tensor<T> q, Tensor<T> k, const Tensor<T>& v, const LayerPE<T>& pe,
                            const PatchGrid& grid, std::size_t leading = 0, const AttentionOptions& opts = {}) {
  if (q.rank() != 4 || q.shape() != k.shape() || v.dim(-2) != q.dim(-2)) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }
  const std::size_t tokens = q.dim(2);
  if (tokens != grid.tokens() + leading) {
    throw ShapeError("attention: " + std::to_string(tokens) + " tokens vs " + std::to_string(grid.tokens()) +
                     " patches + " + std::to_string(leading) + " leading");
  }
  auto patches = [&](const Tensor<T>& x) { return leading ? slice(x, 2, leading, tokens) : x; };
  if (pe.kind == AttentionPE::rope2d) {
    auto rot = [&](const Tensor<T>& x) {
      auto r = rope2d_axial(patches(x), grid);
      return leading ? concat(slice(x, 2, 0, leading), r, 2) : r;
    };
    return scaled_attention(rot(q), rot(k), v, Tensor<T>{}, opts);
  }
  return scaled_attention(q, k, v, pe_bias(patches(q), patches(k), pe, grid), opts);
}

}  // namespace sape2
