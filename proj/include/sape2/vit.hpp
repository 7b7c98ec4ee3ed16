#pragma once

// Small vision transformer classifier with a pluggable position encoding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "sape2/attention.hpp"
#include "sape2/config.hpp"
#include "sape2/ops.hpp"
#include "sape2/pe_baselines.hpp"
#include "sape2/sape2.hpp"

namespace sape2 {

enum class ApeKind { none, learnable, sinusoidal };
enum class Pooling { cls, mean };

/// Encoding selection: one input-side table and one in-attention kind.
struct PEChoice {
  ApeKind ape = ApeKind::none;
  AttentionPE attention = AttentionPE::none;
};

/// Parses `none`, `ape`, `ape-sin`, `rpe`, `rope2d`, `cope`, `sape2` and
/// `+`-joined pairs such as `sape2+ape`.
inline PEChoice parse_pe(const std::string& spec) {
  PEChoice c;
  bool have_ape = false, have_attn = false;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto plus = spec.find('+', start);
    const std::string part = spec.substr(start, plus == std::string::npos ? std::string::npos : plus - start);
    auto set_attn = [&](AttentionPE a) {
      if (have_attn) throw std::invalid_argument("pe '" + spec + "' names two attention encodings");
      have_attn = true;
      c.attention = a;
    };
    auto set_ape = [&](ApeKind a) {
      if (have_ape) throw std::invalid_argument("pe '" + spec + "' names two absolute encodings");
      have_ape = true;
      c.ape = a;
    };
    if (part == "none" && spec == "none") {
    } else if (part == "ape") {
      set_ape(ApeKind::learnable);
    } else if (part == "ape-sin") {
      set_ape(ApeKind::sinusoidal);
    } else if (part == "rpe") {
      set_attn(AttentionPE::rpe);
    } else if (part == "rope2d") {
      set_attn(AttentionPE::rope2d);
    } else if (part == "cope") {
      set_attn(AttentionPE::cope);
    } else if (part == "sape2") {
      set_attn(AttentionPE::sape2);
    } else {
      throw std::invalid_argument("unknown position encoding '" + part + "' in '" + spec +
                                  "' (expected none, ape, ape-sin, rpe, rope2d, cope, sape2 or a `+` pair)");
    }
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  return c;
}

struct VitConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t hidden_dim = 384;
  std::size_t depth = 12;
  std::size_t heads = 6;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  std::string pe = "sape2+ape";
  SapeMode sape_mode = SapeMode::key;
  ClampMode sape_clamp = ClampMode::code;
  std::size_t sape_max_position = 0;  // 0: axis extent
  BiasPlacement bias_placement = BiasPlacement::pre_scale;
  double bias_sign = 1.0;
  Pooling pooling = Pooling::cls;

  PatchGrid grid() const { return PatchGrid::from_image(image_size, image_size, patch_size); }
  std::size_t head_dim() const { return hidden_dim / heads; }
  std::size_t patch_features() const { return patch_size * patch_size * channels; }
  PEChoice pe_choice() const { return parse_pe(pe); }
  std::size_t sape_max_x() const { return sape_max_position ? sape_max_position : grid().cols; }
  std::size_t sape_max_y() const { return sape_max_position ? sape_max_position : grid().rows; }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw std::invalid_argument("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                                  std::to_string(patch_size));
    }
    if (heads == 0 || hidden_dim % heads != 0) {
      throw std::invalid_argument("hidden_dim " + std::to_string(hidden_dim) + " not divisible by heads " +
                                  std::to_string(heads));
    }
    if (num_classes < 1 || depth < 1 || channels < 1 || mlp_ratio < 1) {
      throw std::invalid_argument("num_classes, depth, channels and mlp_ratio must be positive");
    }
    const auto c = pe_choice();
    if (c.attention == AttentionPE::rope2d && head_dim() % 4 != 0) {
      throw std::invalid_argument("rope2d needs head_dim divisible by 4, got " + std::to_string(head_dim()));
    }
    if (c.ape == ApeKind::sinusoidal && hidden_dim % 2 != 0) {
      throw std::invalid_argument("ape-sin needs an even hidden_dim");
    }
  }

  /// Applies one key; returns false when the key is not a model key.
  bool apply(const KeyValue& kv) {
    try {
      if (kv.key == "image_size") image_size = parse_number<std::size_t>(kv);
      else if (kv.key == "patch_size") patch_size = parse_number<std::size_t>(kv);
      else if (kv.key == "channels") channels = parse_number<std::size_t>(kv);
      else if (kv.key == "hidden_dim") hidden_dim = parse_number<std::size_t>(kv);
      else if (kv.key == "depth") depth = parse_number<std::size_t>(kv);
      else if (kv.key == "heads") heads = parse_number<std::size_t>(kv);
      else if (kv.key == "mlp_ratio") mlp_ratio = parse_number<std::size_t>(kv);
      else if (kv.key == "num_classes") num_classes = parse_number<std::size_t>(kv);
      else if (kv.key == "pe") {
        parse_pe(kv.value);
        pe = kv.value;
      } else if (kv.key == "sape_mode") sape_mode = parse_sape_mode(kv.value);
      else if (kv.key == "sape_clamp") sape_clamp = parse_clamp_mode(kv.value);
      else if (kv.key == "sape_max_position") sape_max_position = parse_number<std::size_t>(kv);
      else if (kv.key == "bias_placement") {
        if (kv.value == "pre") bias_placement = BiasPlacement::pre_scale;
        else if (kv.value == "post") bias_placement = BiasPlacement::post_scale;
        else throw std::invalid_argument("bias_placement must be pre or post");
      } else if (kv.key == "bias_sign") {
        if (kv.value == "+" || kv.value == "+1" || kv.value == "1") bias_sign = 1.0;
        else if (kv.value == "-" || kv.value == "-1") bias_sign = -1.0;
        else throw std::invalid_argument("bias_sign must be + or -");
      } else if (kv.key == "pooling") {
        if (kv.value == "cls") pooling = Pooling::cls;
        else if (kv.value == "mean") pooling = Pooling::mean;
        else throw std::invalid_argument("pooling must be cls or mean");
      } else {
        return false;
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what(), kv.line);
    }
    return true;
  }

  std::vector<std::pair<std::string, std::string>> to_key_values() const {
    return {{"image_size", std::to_string(image_size)},
            {"patch_size", std::to_string(patch_size)},
            {"channels", std::to_string(channels)},
            {"hidden_dim", std::to_string(hidden_dim)},
            {"depth", std::to_string(depth)},
            {"heads", std::to_string(heads)},
            {"mlp_ratio", std::to_string(mlp_ratio)},
            {"num_classes", std::to_string(num_classes)},
            {"pe", pe},
            {"sape_mode", to_string(sape_mode)},
            {"sape_clamp", to_string(sape_clamp)},
            {"sape_max_position", std::to_string(sape_max_position)},
            {"bias_placement", bias_placement == BiasPlacement::pre_scale ? "pre" : "post"},
            {"bias_sign", bias_sign > 0 ? "+" : "-"},
            {"pooling", pooling == Pooling::cls ? "cls" : "mean"}};
  }

  bool operator==(const VitConfig&) const = default;
};

/// Closed-form parameter count.
///
///   patch embedding   P*P*C*D + D
///   class token       D                      (cls pooling)
///   learnable APE     N*D                    (ape)
///   per block         4D (two LayerNorms) + 3D^2+3D (qkv) + D^2+D (proj)
///                     + 2*r*D^2 + r*D + D (MLP) + encoding tables:
///                       sape2  dh*(Mx+1) + dh*(My+1)
///                       rpe    heads*((2W-1) + (2H-1))
///                       cope   dh*(N+1)
///   final norm + head 2D + D*K + K
inline std::size_t expected_parameter_count(const VitConfig& c) {
  const std::size_t d = c.hidden_dim, r = c.mlp_ratio, dh = c.head_dim();
  const auto g = c.grid();
  const auto pe = c.pe_choice();
  std::size_t n = c.patch_features() * d + d;
  if (c.pooling == Pooling::cls) n += d;
  if (pe.ape == ApeKind::learnable) n += g.tokens() * d;
  std::size_t block = 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * r * d * d + r * d + d;
  switch (pe.attention) {
    case AttentionPE::sape2: block += dh * (c.sape_max_x() + 1) + dh * (c.sape_max_y() + 1); break;
    case AttentionPE::rpe: block += c.heads * ((2 * g.cols - 1) + (2 * g.rows - 1)); break;
    case AttentionPE::cope: block += dh * (g.tokens() + 1); break;
    case AttentionPE::none:
    case AttentionPE::rope2d: break;
  }
  n += c.depth * block;
  n += 2 * d + d * c.num_classes + c.num_classes;
  return n;
}

/// Rearranges [B, H, W, C] pixels into [B, N, P*P*C] raster-ordered patches;
/// each patch vector is ordered (row, column, channel).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4) throw ShapeError("images must be [B, H, W, C], got " + shape_str(images.shape()));
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  const auto grid = PatchGrid::from_image(h, w, patch);
  const std::size_t feat = patch * patch * c;
  std::vector<T> out(b * grid.tokens() * feat);
  const auto& iv = images.values();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t t = 0; t < grid.tokens(); ++t) {
      const std::size_t y0 = grid.y(t) * patch, x0 = grid.x(t) * patch;
      T* dst = out.data() + (n * grid.tokens() + t) * feat;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t ch = 0; ch < c; ++ch)
            *dst++ = iv[((n * h + y0 + py) * w + x0 + px) * c + ch];
    }
  return Tensor<T>({b, grid.tokens(), feat}, std::move(out));
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    Linear l{Tensor<T>::uniform({in, out}, rng, -bound, bound), Tensor<T>({out})};
    l.weight.set_requires_grad();
    l.bias.set_requires_grad();
    return l;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;

  static LayerNormParams init(std::size_t d) {
    LayerNormParams p{Tensor<T>({d}, T{1}), Tensor<T>({d})};
    p.gamma.set_requires_grad();
    p.beta.set_requires_grad();
    return p;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <typename T>
struct Block {
  LayerNormParams<T> norm1;
  Linear<T> qkv;
  LayerPE<T> pe;
  Linear<T> proj;
  LayerNormParams<T> norm2;
  Linear<T> fc1, fc2;
};

/// Pre-norm ViT: patch embedding, optional absolute table, blocks of
/// attention (with the in-attention encoding) and GELU MLP, then a linear head
/// on the class token or the token mean.
///
/// Encoding tables draw from their own stream, so one seed gives the same
/// backbone weights under every encoding choice.
template <typename T>
class VisionTransformer {
 public:
  explicit VisionTransformer(VitConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    Rng pe_rng(seed ^ 0x5ea9e2d1c0ffee11ULL);
    const std::size_t d = cfg_.hidden_dim, dh = cfg_.head_dim();
    const auto grid = cfg_.grid();
    const auto pe = cfg_.pe_choice();
    patch_embed_ = Linear<T>::init(cfg_.patch_features(), d, rng);
    if (cfg_.pooling == Pooling::cls) {
      cls_ = Tensor<T>::trunc_normal({d}, rng, 0.02);
      cls_.set_requires_grad();
    }
    if (pe.ape == ApeKind::learnable) {
      ape_ = Tensor<T>::trunc_normal({grid.tokens(), d}, pe_rng, 0.02);
      ape_.set_requires_grad();
    } else if (pe.ape == ApeKind::sinusoidal) {
      ape_ = sinusoidal_table<T>(grid.tokens(), d);
    }
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      Block<T> b;
      b.norm1 = LayerNormParams<T>::init(d);
      b.qkv = Linear<T>::init(d, 3 * d, rng);
      b.pe.kind = pe.attention;
      b.pe.sape.mode = cfg_.sape_mode;
      b.pe.sape.clamp = cfg_.sape_clamp;
      switch (pe.attention) {
        case AttentionPE::sape2:
          b.pe.sape_x = PositionTable<T>::init(dh, cfg_.sape_max_x(), pe_rng);
          b.pe.sape_y = PositionTable<T>::init(dh, cfg_.sape_max_y(), pe_rng);
          b.pe.sape_x.emb.set_requires_grad();
          b.pe.sape_y.emb.set_requires_grad();
          break;
        case AttentionPE::rpe:
          b.pe.rpe = RpeTable<T>::init(cfg_.heads, grid, pe_rng);
          b.pe.rpe.x.set_requires_grad();
          b.pe.rpe.y.set_requires_grad();
          break;
        case AttentionPE::cope:
          b.pe.cope = PositionTable<T>::init(dh, grid.tokens(), pe_rng);
          b.pe.cope.emb.set_requires_grad();
          break;
        case AttentionPE::none:
        case AttentionPE::rope2d:
          break;
      }
      b.proj = Linear<T>::init(d, d, rng);
      b.norm2 = LayerNormParams<T>::init(d);
      b.fc1 = Linear<T>::init(d, cfg_.mlp_ratio * d, rng);
      b.fc2 = Linear<T>::init(cfg_.mlp_ratio * d, d, rng);
      blocks_.push_back(std::move(b));
    }
    norm_ = LayerNormParams<T>::init(d);
    head_ = Linear<T>::init(d, cfg_.num_classes, rng);
  }

  const VitConfig& config() const { return cfg_; }
  std::vector<Block<T>>& blocks() { return blocks_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }

  /// Trainable tensors in declaration order (the checkpoint payload order).
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("patch_embed.weight", patch_embed_.weight);
    out.emplace_back("patch_embed.bias", patch_embed_.bias);
    if (cls_.defined()) out.emplace_back("cls_token", cls_);
    if (ape_.defined() && ape_.requires_grad()) out.emplace_back("ape", ape_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.emplace_back(p + "norm1.gamma", b.norm1.gamma);
      out.emplace_back(p + "norm1.beta", b.norm1.beta);
      out.emplace_back(p + "qkv.weight", b.qkv.weight);
      out.emplace_back(p + "qkv.bias", b.qkv.bias);
      switch (b.pe.kind) {
        case AttentionPE::sape2:
          out.emplace_back(p + "sape2.table_x", b.pe.sape_x.emb);
          out.emplace_back(p + "sape2.table_y", b.pe.sape_y.emb);
          break;
        case AttentionPE::rpe:
          out.emplace_back(p + "rpe.table_x", b.pe.rpe.x);
          out.emplace_back(p + "rpe.table_y", b.pe.rpe.y);
          break;
        case AttentionPE::cope:
          out.emplace_back(p + "cope.table", b.pe.cope.emb);
          break;
        case AttentionPE::none:
        case AttentionPE::rope2d:
          break;
      }
      out.emplace_back(p + "proj.weight", b.proj.weight);
      out.emplace_back(p + "proj.bias", b.proj.bias);
      out.emplace_back(p + "norm2.gamma", b.norm2.gamma);
      out.emplace_back(p + "norm2.beta", b.norm2.beta);
      out.emplace_back(p + "fc1.weight", b.fc1.weight);
      out.emplace_back(p + "fc1.bias", b.fc1.bias);
      out.emplace_back(p + "fc2.weight", b.fc2.weight);
      out.emplace_back(p + "fc2.bias", b.fc2.bias);
    }
    out.emplace_back("norm.gamma", norm_.gamma);
    out.emplace_back("norm.beta", norm_.beta);
    out.emplace_back("head.weight", head_.weight);
    out.emplace_back("head.bias", head_.bias);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  /// Copies parameter values (any precision) from a model of the same config.
  template <typename U>
  void copy_parameters_from(const VisionTransformer<U>& other) {
    const auto src = other.named_parameters();
    auto dst = named_parameters();
    if (src.size() != dst.size()) throw std::invalid_argument("copy_parameters_from: layout mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto& d = dst[i].second;
      const auto& s = src[i].second;
      if (d.shape() != s.shape()) throw std::invalid_argument("copy_parameters_from: shape mismatch at " + dst[i].first);
      for (std::size_t j = 0; j < d.numel(); ++j) d[j] = static_cast<T>(s[j]);
    }
  }

  /// Patch embedding (plus absolute table): [B, H, W, C] -> [B, N, D].
  Tensor<T> patchify(const Tensor<T>& images) const {
    check_images(images);
    auto x = patch_embed_(extract_patches(images, cfg_.patch_size));
    if (ape_.defined()) x = apply_ape(x, ape_);
    return x;
  }

  Tensor<T> forward(const Tensor<T>& images) const {
    auto x = tokens_before(images, blocks_.size());
    x = norm_(x);
    const auto pooled = cfg_.pooling == Pooling::cls ? select(x, 1, 0) : mean_axis(x, 1);
    return head_(pooled);
  }

  /// Queries and keys of one layer's patch tokens, each [B, heads, N, dh].
  std::pair<Tensor<T>, Tensor<T>> layer_qk(const Tensor<T>& images, std::size_t layer) const {
    if (layer >= blocks_.size()) throw std::out_of_range("layer " + std::to_string(layer) + " out of range");
    const auto x = tokens_before(images, layer);
    auto [q, k, v] = split_heads(blocks_[layer], x);
    const std::size_t lead = leading_tokens(), t = q.dim(2);
    if (lead) return {slice(q, 2, lead, t), slice(k, 2, lead, t)};
    return {q, k};
  }

  /// SaPE2 bias field of one layer over patch tokens, [B, heads, N, N].
  Tensor<T> layer_sape2_bias(const Tensor<T>& images, std::size_t layer) const {
    const auto& pe = blocks_.at(layer).pe;
    if (pe.kind != AttentionPE::sape2) throw std::invalid_argument("layer does not use sape2");
    auto [q, k] = layer_qk(images, layer);
    return sape2_bias(q, k, pe.sape_x, pe.sape_y, cfg_.grid(), pe.sape);
  }

 private:
  std::size_t leading_tokens() const { return cfg_.pooling == Pooling::cls ? 1 : 0; }

  void check_images(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.image_size || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.channels) {
      throw ShapeError("images " + shape_str(images.shape()) + " do not match config [B, " +
                       std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) + ", " +
                       std::to_string(cfg_.channels) + "]");
    }
  }

  // Runs the embedding and the first `layers` blocks.
  Tensor<T> tokens_before(const Tensor<T>& images, std::size_t layers) const {
    auto x = patchify(images);
    if (cls_.defined()) x = prepend_token(x, cls_);
    for (std::size_t i = 0; i < layers; ++i) x = run_block(blocks_[i], x);
    return x;
  }

  std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> split_heads(const Block<T>& b, const Tensor<T>& x) const {
    const std::size_t batch = x.dim(0), t = x.dim(1);
    const auto qkv = permute(reshape(b.qkv(b.norm1(x)), {batch, t, 3, cfg_.heads, cfg_.head_dim()}), {2, 0, 3, 1, 4});
    return {select(qkv, 0, 0), select(qkv, 0, 1), select(qkv, 0, 2)};
  }

  Tensor<T> run_block(const Block<T>& b, const Tensor<T>& x) const {
    const std::size_t batch = x.dim(0), t = x.dim(1);
    auto [q, k, v] = split_heads(b, x);
    const AttentionOptions opts{cfg_.bias_placement, cfg_.bias_sign};
    const auto a = attention_with_pe(q, k, v, b.pe, cfg_.grid(), leading_tokens(), opts);
    const auto merged = reshape(permute(a, {0, 2, 1, 3}), {batch, t, cfg_.hidden_dim});
    auto y = add(x, b.proj(merged));
    return add(y, b.fc2(gelu(b.fc1(b.norm2(y)))));
  }

  VitConfig cfg_;
  Linear<T> patch_embed_;
  Tensor<T> cls_;
  Tensor<T> ape_;
  std::vector<Block<T>> blocks_;
  LayerNormParams<T> norm_;
  Linear<T> head_;
};

/// Fraction of rows whose label ranks among the k largest logits; ties go
/// to the lower class index.
template <typename T>
double top_k_accuracy(const Tensor<T>& logits, const std::vector<int>& labels, std::size_t k) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("top_k_accuracy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t classes = logits.dim(1);
  if (k < 1 || k > classes) throw std::invalid_argument("top_k_accuracy: k must be in [1, " + std::to_string(classes) + "]");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const T* row = logits.values().data() + b * classes;
    const auto y = static_cast<std::size_t>(labels[b]);
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (row[c] > row[y] || (row[c] == row[y] && c < y)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace sape2
