#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "sape2/checkpoint.hpp"
#include "sape2/optim.hpp"
#include "sape2/vit.hpp"
#include "test_util.hpp"

using namespace sape2;
using sape2::testing::TensorD;

namespace {

VitConfig tiny(const std::string& pe = "sape2+ape") {
  VitConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.hidden_dim = 32;
  c.depth = 2;
  c.heads = 4;
  c.mlp_ratio = 2;
  c.num_classes = 5;
  c.pe = pe;
  return c;
}

template <typename T>
Tensor<T> random_images(std::size_t b, const VitConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<T>::uniform({b, c.image_size, c.image_size, c.channels}, rng, 0.0, 1.0);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("sape2_test_" + name);
}

}  // namespace

TEST(ParsePE, AcceptsEveryStrategy) {
  EXPECT_EQ(parse_pe("none").ape, ApeKind::none);
  EXPECT_EQ(parse_pe("none").attention, AttentionPE::none);
  EXPECT_EQ(parse_pe("ape").ape, ApeKind::learnable);
  EXPECT_EQ(parse_pe("ape-sin").ape, ApeKind::sinusoidal);
  EXPECT_EQ(parse_pe("rope2d").attention, AttentionPE::rope2d);
  EXPECT_EQ(parse_pe("cope").attention, AttentionPE::cope);
  EXPECT_EQ(parse_pe("rpe").attention, AttentionPE::rpe);
  const auto c = parse_pe("sape2+ape");
  EXPECT_EQ(c.ape, ApeKind::learnable);
  EXPECT_EQ(c.attention, AttentionPE::sape2);
  EXPECT_EQ(parse_pe("cope+ape").attention, AttentionPE::cope);
  EXPECT_EQ(parse_pe("rope2d+ape").ape, ApeKind::learnable);
}

TEST(ParsePE, RejectsUnknownAndDuplicates) {
  EXPECT_THROW(parse_pe("alibi"), std::invalid_argument);
  EXPECT_THROW(parse_pe("sape2+cope"), std::invalid_argument);
  EXPECT_THROW(parse_pe("ape+ape-sin"), std::invalid_argument);
  EXPECT_THROW(parse_pe("none+ape"), std::invalid_argument);
  EXPECT_THROW(parse_pe(""), std::invalid_argument);
}

TEST(VitConfig, ValidationNamesTheProblem) {
  auto c = tiny();
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny();
  c.heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny("rope2d");
  c.hidden_dim = 24;
  c.heads = 4;  // head_dim 6
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(VitConfig, KeyValueRoundTrip) {
  auto c = tiny("cope+ape");
  c.sape_mode = SapeMode::query;
  c.bias_sign = -1;
  c.pooling = Pooling::mean;
  std::string text;
  for (const auto& [k, v] : c.to_key_values()) text += k + " = " + v + "\n";
  VitConfig back;
  for (const auto& kv : parse_key_values(text)) ASSERT_TRUE(back.apply(kv)) << kv.key;
  EXPECT_EQ(back, c);
  EXPECT_FALSE(back.apply({"epochs", "3", 1}));
  EXPECT_THROW(back.apply({"pooling", "max", 7}), ConfigError);
}

TEST(Patchify, TokenCounts) {
  VitConfig c;
  c.hidden_dim = 24;
  c.heads = 2;
  c.depth = 1;
  c.pe = "none";
  VisionTransformer<double> m(c, 1);
  EXPECT_EQ(m.patchify(random_images<double>(2, c, 3)).shape(), (Shape{2, 64, 24}));

  c.image_size = 8;
  c.patch_size = 8;
  VisionTransformer<double> one(c, 1);
  EXPECT_EQ(one.patchify(random_images<double>(1, c, 3)).shape(), (Shape{1, 1, 24}));
}

TEST(Patchify, RasterOrderXFastest) {
  TensorD img({1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
  const auto p = extract_patches(img, 2);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 4}));
  // token 1 is the top-right patch (x = 1, y = 0)
  EXPECT_EQ(p[4], 2.0);
  EXPECT_EQ(p[5], 3.0);
  EXPECT_EQ(p[6], 6.0);
  EXPECT_EQ(p[7], 7.0);
  // token 2 is bottom-left
  EXPECT_EQ(p[8], 8.0);
}

TEST(Patchify, ConstantImageGivesIdenticalTokens) {
  auto c = tiny("none");
  VisionTransformer<double> m(c, 2);
  TensorD img({1, 16, 16, 3}, 0.3);
  const auto t = m.patchify(img);
  for (std::size_t n = 1; n < t.dim(1); ++n)
    for (std::size_t d = 0; d < t.dim(2); ++d) EXPECT_EQ(t[n * t.dim(2) + d], t[d]);
}

TEST(Patchify, ErrorsOnMismatch) {
  EXPECT_THROW(extract_patches(TensorD({1, 6, 6, 3}), 4), std::invalid_argument);
  VisionTransformer<double> m(tiny(), 0);
  EXPECT_THROW(m.forward(TensorD({1, 32, 32, 3})), ShapeError);
}

TEST(Forward, LogitShapeForEveryStrategy) {
  for (const std::string pe : {"none", "ape", "ape-sin", "rpe", "rope2d", "cope", "sape2", "sape2+ape", "cope+ape",
                               "rope2d+ape"}) {
    auto c = tiny(pe);
    VisionTransformer<double> m(c, 4);
    const auto y = m.forward(random_images<double>(3, c, 5));
    EXPECT_EQ(y.shape(), (Shape{3, 5})) << pe;
    for (double v : y.values()) EXPECT_TRUE(std::isfinite(v)) << pe;
  }
}

TEST(Forward, Cifar10ConfigShape) {
  VitConfig c;
  c.hidden_dim = 48;
  c.heads = 6;
  c.depth = 1;
  VisionTransformer<float> m(c, 0);
  EXPECT_EQ(m.forward(random_images<float>(2, c, 1)).shape(), (Shape{2, 10}));
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  auto c = tiny();
  VisionTransformer<float> m(c, 6);
  auto one = random_images<float>(1, c, 7);
  Tensor<float> two({2, 16, 16, 3});
  for (std::size_t i = 0; i < one.numel(); ++i) two[i] = two[i + one.numel()] = one[i];
  const auto y = m.forward(two);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(y[k], y[5 + k], 1e-6);
}

TEST(Forward, ZeroSapeTablesMatchNoEncoding) {
  for (auto pooling : {Pooling::cls, Pooling::mean}) {
    auto cs = tiny("sape2");
    auto cn = tiny("none");
    cs.pooling = cn.pooling = pooling;
    VisionTransformer<double> with(cs, 8), without(cn, 8);
    for (auto& b : with.blocks()) {
      std::fill(b.pe.sape_x.emb.values().begin(), b.pe.sape_x.emb.values().end(), 0.0);
      std::fill(b.pe.sape_y.emb.values().begin(), b.pe.sape_y.emb.values().end(), 0.0);
    }
    const auto x = random_images<double>(2, cs, 9);
    const auto a = with.forward(x);
    const auto b = without.forward(x);
    const auto r = oracle::compare(a.values(), b.values(), 1e-10);
    EXPECT_LE(r.max_abs_err, 1e-10) << r;
  }
}

TEST(Forward, FloatAndDoubleAgree) {
  auto c = tiny();
  VisionTransformer<double> md(c, 10);
  VisionTransformer<float> mf(c, 10);
  mf.copy_parameters_from(md);
  const auto xd = random_images<double>(2, c, 11);
  const auto xf = xd.cast<float>();
  const auto yd = md.forward(xd);
  const auto yf = mf.forward(xf);
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-3);
}

TEST(Parameters, CountMatchesClosedForm) {
  for (const std::string pe : {"none", "ape", "ape-sin", "rpe", "rope2d", "cope", "sape2", "sape2+ape"}) {
    for (auto pooling : {Pooling::cls, Pooling::mean}) {
      auto c = tiny(pe);
      c.pooling = pooling;
      VisionTransformer<float> m(c, 0);
      EXPECT_EQ(m.parameter_count(), expected_parameter_count(c)) << pe;
    }
  }
  auto c = tiny("sape2");
  c.sape_max_position = 7;
  EXPECT_EQ(VisionTransformer<float>(c, 0).parameter_count(), expected_parameter_count(c));
}

TEST(Parameters, SameSeedSameBackboneAcrossEncodings) {
  VisionTransformer<double> a(tiny("none"), 12), b(tiny("sape2+ape"), 12);
  EXPECT_EQ(sape2::testing::to_vec(a.blocks()[1].fc2.weight), sape2::testing::to_vec(b.blocks()[1].fc2.weight));
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  const auto l = cross_entropy(TensorD({2, 7}), {3, 6});
  EXPECT_NEAR(l.item(), std::log(7.0), 1e-12);
}

TEST(CrossEntropy, SaturatedLogitsGiveZero) {
  TensorD z({1, 4});
  z[2] = 50;
  EXPECT_NEAR(cross_entropy(z, {2}).item(), 0.0, 1e-20);
}

TEST(CrossEntropy, MatchesScalarLoop) {
  Rng rng(13);
  const auto z = TensorD::randn({6, 5}, rng, 3.0);
  const std::vector<int> y{0, 4, 2, 2, 1, 3};
  double expect = 0;
  for (std::size_t b = 0; b < 6; ++b) {
    double m = -1e300, s = 0;
    for (std::size_t k = 0; k < 5; ++k) m = std::max(m, z[b * 5 + k]);
    for (std::size_t k = 0; k < 5; ++k) s += std::exp(z[b * 5 + k] - m);
    expect += -(z[b * 5 + y[b]] - m - std::log(s));
  }
  EXPECT_NEAR(cross_entropy(z, y).item(), expect / 6, 1e-10);
}

TEST(CrossEntropy, OutOfRangeLabel) {
  EXPECT_THROW(cross_entropy(TensorD({1, 3}), {3}), std::out_of_range);
  EXPECT_THROW(cross_entropy(TensorD({1, 3}), {-1}), std::out_of_range);
}

TEST(TopK, Examples) {
  TensorD perfect({3, 4});
  perfect[0 * 4 + 1] = 1;
  perfect[1 * 4 + 3] = 1;
  perfect[2 * 4 + 0] = 1;
  for (std::size_t k = 1; k <= 4; ++k) EXPECT_EQ(top_k_accuracy(perfect, {1, 3, 0}, k), 1.0);

  Rng rng(14);
  const auto r = TensorD::randn({9, 4}, rng);
  EXPECT_EQ(top_k_accuracy(r, {0, 1, 2, 3, 0, 1, 2, 3, 0}, 4), 1.0);

  TensorD z({4, 3}, std::vector<double>{5, 1, 0,  //
                                        0, 5, 1,  //
                                        1, 0, 5,  //
                                        5, 1, 0});
  EXPECT_DOUBLE_EQ(top_k_accuracy(z, {0, 1, 2, 2}, 1), 0.75);
}

TEST(TopK, TiesGoToLowerIndex) {
  TensorD z({1, 3}, std::vector<double>{1, 1, 0});
  EXPECT_EQ(top_k_accuracy(z, {0}, 1), 1.0);
  EXPECT_EQ(top_k_accuracy(z, {1}, 1), 0.0);
  EXPECT_EQ(top_k_accuracy(z, {1}, 2), 1.0);
}

TEST(TopK, InvalidK) {
  EXPECT_THROW(top_k_accuracy(TensorD({1, 3}), {0}, 0), std::invalid_argument);
  EXPECT_THROW(top_k_accuracy(TensorD({1, 3}), {0}, 4), std::invalid_argument);
}

TEST(Training, OneSmallStepLowersTheBatchLoss) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = tiny();
    VisionTransformer<double> m(c, seed);
    const auto x = random_images<double>(4, c, 100 + seed);
    const std::vector<int> y{0, 1, 2, 3};
    Adam<double> opt(m.parameters(), {.lr = 1e-4});
    const auto before = cross_entropy(m.forward(x), y);
    opt.zero_grad();
    before.backward();
    opt.step();
    const double after = cross_entropy(m.forward(x), y).item();
    EXPECT_LT(after, before.item()) << "seed " << seed;
  }
}

TEST(Training, GradientsReachEveryParameterUnderMeanPooling) {
  auto c = tiny();
  c.pooling = Pooling::mean;
  VisionTransformer<double> m(c, 15);
  cross_entropy(m.forward(random_images<double>(2, c, 16)), {1, 2}).backward();
  for (auto& [name, p] : m.named_parameters()) {
    ASSERT_TRUE(p.has_grad()) << name;
    double norm = 0;
    for (double g : p.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Training, LastLayerTablesAreInertUnderClsPooling) {
  auto c = tiny("sape2");
  VisionTransformer<double> m(c, 15);
  cross_entropy(m.forward(random_images<double>(2, c, 16)), {1, 2}).backward();
  const auto& last = m.blocks().back().pe;
  for (double g : last.sape_x.emb.grad()) EXPECT_EQ(g, 0.0);
  double first = 0;
  for (double g : m.blocks().front().pe.sape_x.emb.grad()) first += std::abs(g);
  EXPECT_GT(first, 0.0);
}

TEST(LayerBias, ConstantImageGivesZeroFieldWithoutAbsoluteTable) {
  auto c = tiny("sape2");
  VisionTransformer<double> m(c, 17);
  TensorD img({1, 16, 16, 3}, 0.7);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const auto b = m.layer_sape2_bias(img, layer);
    EXPECT_EQ(b.shape(), (Shape{1, 4, 16, 16}));
    for (double v : b.values()) EXPECT_NEAR(v, 0.0, 1e-12);
  }
  VisionTransformer<double> none(tiny("none"), 0);
  EXPECT_THROW(none.layer_sape2_bias(img, 0), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsFloatExact) {
  auto c = tiny("sape2+ape");
  c.sape_mode = SapeMode::query;
  VisionTransformer<float> m(c, 18);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path.string(), m, 3);
  const auto loaded = load_checkpoint<float>(path.string());
  EXPECT_EQ(loaded.header.config, c);
  EXPECT_EQ(loaded.header.epoch, 3u);
  const auto a = m.named_parameters();
  const auto b = loaded.model.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsVersionMismatchAndTruncation) {
  VisionTransformer<float> m(tiny("none"), 19);
  const auto path = temp_path("version.ckpt");
  save_checkpoint(path.string(), m);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto patched = bytes;
  patched.replace(patched.find("version = 1"), 11, "version = 9");
  std::ofstream(path, std::ios::binary | std::ios::trunc) << patched;
  EXPECT_THROW(load_checkpoint<float>(path.string()), CheckpointError);

  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW(load_checkpoint<float>(path.string()), CheckpointError);

  std::ofstream(path, std::ios::binary | std::ios::trunc) << "not a checkpoint\n";
  EXPECT_THROW(load_checkpoint<float>(path.string()), CheckpointError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path.string()), CheckpointError);
}
