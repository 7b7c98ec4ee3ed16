#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "sape2/attention.hpp"
#include "sape2/fixture.hpp"
#include "sape2/oracles.hpp"
#include "sape2/sape2.hpp"
#include "test_util.hpp"

namespace sape2 {
namespace {

using oracle::InstanceSpec;
using oracle::make_instance;
using testing::TensorD;
using testing::to_vec;

TEST(Gates, KnownValues) {
  TensorD q({1, 2, 2}, {1, 0, 0, 1});
  TensorD k({1, 2, 2}, {0, 1, 1, 0});
  const auto g = compute_gates(q, k, 1.0);
  EXPECT_DOUBLE_EQ(g[0], 0.5);  // q0 . k0 = 0
  EXPECT_DOUBLE_EQ(g[3], 0.5);
  TensorD q3({1, 1, 1}, {std::log(3.0)});
  TensorD k3({1, 1, 1}, {2.0});
  EXPECT_NEAR(compute_gates(q3, k3, 0.5).item(), 0.75, 1e-15);
}

TEST(Gates, MatchScalarSigmoidOfDot) {
  Rng rng(17);
  auto q = TensorD::randn({1, 4, 8}, rng);
  auto k = TensorD::randn({1, 4, 8}, rng);
  const double s = 1.0 / std::sqrt(8.0);
  const auto g = compute_gates(q, k, s);
  std::vector<double> expect(16);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < 8; ++c) dot += q[i * 8 + c] * k[j * 8 + c];
      expect[i * 4 + j] = oracle::scalar_sigmoid(s * dot);
    }
  EXPECT_TRUE(oracle::compare(to_vec(g), expect, 1e-12).pass);
}

TEST(Gates, ShapeMismatch) { EXPECT_THROW(compute_gates(TensorD({1, 2, 3}), TensorD({1, 3, 3}), 1.0), ShapeError); }

TEST(AccumulatePositions, SuffixSumsAndClamp) {
  TensorD ones({1, 4}, {1, 1, 1, 1});
  EXPECT_EQ(to_vec(accumulate_positions(ones, 100.0)), (std::vector<double>{4, 3, 2, 1}));
  // M = 4 with the code clamp gives a bound of 3
  EXPECT_EQ(to_vec(accumulate_positions(ones, clamp_bound(4, ClampMode::code))), (std::vector<double>{3, 3, 2, 1}));
  EXPECT_EQ(to_vec(accumulate_positions(TensorD({1, 2}, {0.5, 0.5}), 10.0)), (std::vector<double>{1.0, 0.5}));
}

TEST(InterpolateLogits, KnotsAndMidpoints) {
  TensorD z({1, 3}, {0, 2, 4});
  EXPECT_DOUBLE_EQ(interpolate_logits(z, TensorD({1, 1}, {2.0})).item(), 4.0);
  EXPECT_DOUBLE_EQ(interpolate_logits(z, TensorD({1, 1}, {1.5})).item(), 3.0);
  EXPECT_DOUBLE_EQ(interpolate_logits(z, TensorD({1, 1}, {0.0})).item(), 0.0);
}

TEST(InterpolateLogits, RejectsOutOfRangePositions) {
  TensorD z({1, 3}, {0, 2, 4});
  EXPECT_THROW(interpolate_logits(z, TensorD({1, 1}, {2.5})), std::out_of_range);
  EXPECT_THROW(interpolate_logits(z, TensorD({1, 1}, {-0.1})), std::out_of_range);
}

TEST(InterpolateLogits, MatchesDirectEmbeddingPath) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto in = make_instance(seed, {.rows = 3, .cols = 8, .dim = 6, .mode = SapeMode::query});
    for (Axis axis : {Axis::x, Axis::y}) {
      const auto fast = build_axis_vectors(in.q, in.k, axis == Axis::x ? in.table_x : in.table_y, in.grid, axis, in.opts);
      const auto r = oracle::compare(to_vec(fast), oracle::direct_sape_vectors(in.problem, axis), 1e-12);
      EXPECT_TRUE(r.pass) << r;
    }
  }
}

TEST(AxisVectors, ZeroTableGivesZeroVectors) {
  auto in = make_instance(3, {.rows = 3, .cols = 3});
  in.table_x = PositionTable<double>::zeros(4, 3);
  for (double v : to_vec(build_axis_vectors(in.q, in.k, in.table_x, in.grid, Axis::x))) EXPECT_EQ(v, 0.0);
}

TEST(AxisVectors, ZeroQueryInQueryMode) {
  auto in = make_instance(4, {.rows = 2, .cols = 4, .mode = SapeMode::query});
  // patch 1 gets q = 0; its gates are 0.5 but its projections vanish
  for (std::size_t c = 0; c < 4; ++c) in.q[1 * 4 + c] = 0.0;
  const auto v = build_axis_vectors(in.q, in.k, in.table_x, in.grid, Axis::x, in.opts);
  for (std::size_t m = 0; m < 4; ++m) EXPECT_EQ(v[1 * 4 + m], 0.0);
}

TEST(AxisVectors, DuplicatedRowsGiveIdenticalVectors) {
  for (SapeMode mode : {SapeMode::query, SapeMode::key}) {
    auto in = make_instance(5, {.rows = 4, .cols = 4, .mode = mode});
    // copy grid row 0 into grid row 2, in both q and k
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 4; ++c) {
        in.q[(8 + x) * 4 + c] = in.q[x * 4 + c];
        in.k[(8 + x) * 4 + c] = in.k[x * 4 + c];
      }
    const auto v = build_axis_vectors(in.q, in.k, in.table_x, in.grid, Axis::x, in.opts);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(v[i], v[32 + i], 1e-12);
  }
}

TEST(AxisVectors, ModeParsing) {
  EXPECT_EQ(parse_sape_mode("query"), SapeMode::query);
  EXPECT_EQ(parse_sape_mode("K"), SapeMode::key);
  EXPECT_THROW(parse_sape_mode("value"), std::invalid_argument);
}

TEST(AxisBias, Basics) {
  TensorD same({1, 1, 3, 2}, {1, 2, 1, 2, 1, 2});
  for (double v : to_vec(axis_bias(same))) EXPECT_EQ(v, 0.0);
  TensorD v({1, 1, 2, 8}, {0, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0});
  EXPECT_DOUBLE_EQ(axis_bias(v)[1], 5.0);
}

TEST(Sape2Bias, MatchesBruteForceOnSmallGrids) {
  for (auto [rows, cols] : {std::pair{1, 1}, {2, 2}, {2, 3}, {3, 2}, {4, 4}}) {
    auto in = make_instance(40 + rows * 7 + cols, {.batch = 2, .heads = 2, .rows = std::size_t(rows),
                                                   .cols = std::size_t(cols), .dim = 4});
    const auto fast = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
    const auto r = oracle::compare(to_vec(fast), oracle::brute_force_bias(in.problem), 1e-10, fast.shape());
    EXPECT_TRUE(r.pass) << rows << "x" << cols << ": " << r;
  }
}

TEST(Sape2Bias, ShapeContractAndGridErrors) {
  auto in = make_instance(1, {.batch = 3, .heads = 2, .rows = 2, .cols = 2, .dim = 4});
  const auto b = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid);
  EXPECT_EQ(b.shape(), (Shape{3, 2, 4, 4}));
  EXPECT_THROW(sape2_bias(in.q, in.k, in.table_x, in.table_y, PatchGrid{1, 3}), ShapeError);
  auto wrong_table = PositionTable<double>::zeros(5, 2);
  EXPECT_THROW(sape2_bias(in.q, in.k, wrong_table, in.table_y, in.grid), ShapeError);
}

TEST(Sape2Bias, ConstantContentGivesZeroField) {
  auto in = make_instance(8, {.rows = 3, .cols = 3});
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      in.q[i * 4 + c] = in.q[c];
      in.k[i * 4 + c] = in.k[c];
    }
  for (double v : to_vec(sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid))) EXPECT_EQ(v, 0.0);
}

TEST(Sape2Bias, RectangularGridUsesAxisSpecificTables) {
  auto in = make_instance(9, {.rows = 2, .cols = 5, .dim = 4});
  EXPECT_EQ(in.table_x.max_position(), 5u);
  EXPECT_EQ(in.table_y.max_position(), 2u);
  EXPECT_EQ(build_axis_vectors(in.q, in.k, in.table_x, in.grid, Axis::x).shape(), (Shape{1, 1, 10, 5}));
  EXPECT_EQ(build_axis_vectors(in.q, in.k, in.table_y, in.grid, Axis::y).shape(), (Shape{1, 1, 10, 2}));
}

TEST(Sape2Bias, TextClampModeMatchesOracle) {
  auto in = make_instance(10, {.rows = 4, .cols = 4, .dim = 4, .clamp = ClampMode::text, .qk_std = 2.0});
  const auto fast = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
  EXPECT_TRUE(oracle::compare(to_vec(fast), oracle::brute_force_bias(in.problem), 1e-10).pass);
}

TEST(Sape2Bias, BothModeMatchesOracle) {
  auto in = make_instance(12, {.rows = 3, .cols = 3, .dim = 4, .mode = SapeMode::both});
  const auto fast = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
  EXPECT_TRUE(oracle::compare(to_vec(fast), oracle::brute_force_bias(in.problem), 1e-10).pass);
}

// Invariants over seeded random instances.

TEST(Sape2Invariants, GatesInsideOpenIntervalAndPositionsMonotone) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto in = make_instance(seed, {.batch = 2, .heads = 2, .rows = 4, .cols = 6, .dim = 8, .qk_std = 3.0});
    const auto qs = axis_slices(in.q, in.grid, Axis::x);
    const auto ks = axis_slices(in.k, in.grid, Axis::x);
    const auto g = compute_gates(qs, ks, 1.0 / std::sqrt(8.0));
    for (double v : to_vec(g)) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    const double bound = clamp_bound(6, ClampMode::code);
    const auto p = accumulate_positions(g, bound);
    for (std::size_t row = 0; row < p.numel() / 6; ++row) {
      for (std::size_t m = 0; m < 6; ++m) {
        EXPECT_LE(p[row * 6 + m], bound);
        EXPECT_GE(p[row * 6 + m], 0.0);
        if (m + 1 < 6) {
          EXPECT_GE(p[row * 6 + m], p[row * 6 + m + 1]);
        }
      }
    }
  }
}

TEST(Sape2Invariants, SaturatedGatesGiveClampedSuffixCounts) {
  const std::size_t w = 4, m_max = 4;
  auto in = make_instance(0, {.rows = 2, .cols = w, .dim = 4});
  // unit q = k with gate scale 50 puts every gate logit at 50
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 4; ++c) in.q[i * 4 + c] = in.k[i * 4 + c] = c == 0 ? 1.0 : 0.0;
  const auto g = compute_gates(axis_slices(in.q, in.grid, Axis::x), axis_slices(in.k, in.grid, Axis::x), 50.0);
  const auto p = accumulate_positions(g, clamp_bound(m_max, ClampMode::code));
  for (std::size_t row = 0; row < p.numel() / w; ++row)
    for (std::size_t m = 0; m < w; ++m) {
      const double expect = std::min<double>(w - m, m_max - 1);
      EXPECT_NEAR(p[row * w + m], expect, 1e-9);
    }
}

TEST(Sape2Invariants, BiasFieldIsAMetric) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto in = make_instance(seed, {.batch = 1, .heads = 2, .rows = 4, .cols = 4, .dim = 8});
    const auto b = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid);
    const std::size_t n = 16;
    for (std::size_t h = 0; h < 2; ++h) {
      const double* f = b.values().data() + h * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(f[i * n + i], 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          EXPECT_EQ(f[i * n + j], f[j * n + i]);
          EXPECT_GE(f[i * n + j], 0.0);
          for (std::size_t m = 0; m < n; ++m) EXPECT_LE(f[i * n + j], f[i * n + m] + f[m * n + j] + 1e-9);
        }
      }
    }
  }
}

TEST(Sape2Invariants, IdenticalAxisVectorsGiveExactlyZeroBias) {
  auto in = make_instance(77, {.rows = 4, .cols = 4, .dim = 4});
  // rows 0 and 3 identical and columns 1 and 2 identical force equal vectors
  // for patches (1,0),(2,0),(1,3),(2,3) on both axes
  for (std::size_t x = 0; x < 4; ++x)
    for (std::size_t c = 0; c < 4; ++c) {
      in.q[(12 + x) * 4 + c] = in.q[x * 4 + c];
      in.k[(12 + x) * 4 + c] = in.k[x * 4 + c];
    }
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t c = 0; c < 4; ++c) {
      in.q[(y * 4 + 2) * 4 + c] = in.q[(y * 4 + 1) * 4 + c];
      in.k[(y * 4 + 2) * 4 + c] = in.k[(y * 4 + 1) * 4 + c];
    }
  const auto vx = build_axis_vectors(in.q, in.k, in.table_x, in.grid, Axis::x);
  const auto vy = build_axis_vectors(in.q, in.k, in.table_y, in.grid, Axis::y);
  const auto b = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t n = 0; n < 16; ++n) {
      bool same = true;
      for (std::size_t r = 0; r < 4; ++r) same = same && vx[i * 4 + r] == vx[n * 4 + r] && vy[i * 4 + r] == vy[n * 4 + r];
      if (same) {
        EXPECT_EQ(b[i * 16 + n], 0.0) << i << "," << n;
      }
    }
  EXPECT_EQ(b[1 * 16 + 2], 0.0);
}

TEST(Sape2Invariants, PermutingPatchesWithinARowChangesTheField) {
  bool changed = false;
  for (std::uint64_t seed = 0; seed < 5 && !changed; ++seed) {
    auto in = make_instance(seed, {.rows = 3, .cols = 4, .dim = 4});
    const auto before = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid);
    // swap patches (0,0) and (3,0) and compare against the relabelled field
    auto q2 = in.q.clone(), k2 = in.k.clone();
    for (std::size_t c = 0; c < 4; ++c) {
      std::swap(q2[0 * 4 + c], q2[3 * 4 + c]);
      std::swap(k2[0 * 4 + c], k2[3 * 4 + c]);
    }
    const auto after = sape2_bias(q2, k2, in.table_x, in.table_y, in.grid);
    auto relabel = [](std::size_t i) { return i == 0 ? 3 : (i == 3 ? 0 : i); };
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        if (std::abs(after[relabel(i) * 12 + relabel(j)] - before[i * 12 + j]) > 1e-9) changed = true;
  }
  EXPECT_TRUE(changed);
}

TEST(Sape2Gradients, MatchFiniteDifferences) {
  auto in = make_instance(2024, {.batch = 1, .heads = 2, .rows = 4, .cols = 4, .dim = 8, .max_x = 4, .max_y = 4});
  const auto grid = in.grid;
  const auto opts = in.opts;
  const auto reports = testing::gradient_check(
      [grid, opts](const std::vector<TensorD>& t) {
        return sum(sape2_bias(t[0], t[1], PositionTable<double>{t[2]}, PositionTable<double>{t[3]}, grid, opts));
      },
      {in.q, in.k, in.table_x.emb, in.table_y.emb});
  testing::expect_all_pass(reports);
}

// Golden bias field for a seeded 2x2 grid, d=4, M=2. The file stores the
// generating parameters and the oracle output; both paths are recomputed.
TEST(Sape2Golden, TwoByTwoField) {
  const std::filesystem::path path = std::filesystem::path(SAPE2_GOLDEN_DIR) / "sape2_bias_2x2_d4_m2.txt";
  const InstanceSpec spec{.rows = 2, .cols = 2, .dim = 4, .max_x = 2, .max_y = 2};
  const std::uint64_t seed = 20240601;
  auto in = make_instance(seed, spec);
  const auto oracle_field = oracle::brute_force_bias(in.problem);
  if (std::getenv("SAPE2_WRITE_GOLDEN") && !std::filesystem::exists(path)) {
    oracle::write_golden(path, {{{"seed", std::to_string(seed)},
                                 {"grid", "2x2"},
                                 {"dim", "4"},
                                 {"max_position", "2"},
                                 {"mode", "key"},
                                 {"clamp", "code"},
                                 {"init", "normal(0,1) q,k,table_x,table_y in that order"}},
                                oracle_field});
  }
  const auto golden = oracle::read_golden(path);
  ASSERT_EQ(golden.header.at("seed"), std::to_string(seed));
  ASSERT_EQ(golden.values.size(), 16u);
  EXPECT_TRUE(oracle::compare(oracle_field, golden.values, 1e-12).pass);
  const auto fast = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid, in.opts);
  EXPECT_TRUE(oracle::compare(to_vec(fast), golden.values, 1e-10).pass);
}

// Attention with the encoding hooked in.

TEST(AttentionWithPE, SingleTokenReturnsValue) {
  TensorD q({1, 1, 1, 4}, {1, 2, 3, 4}), k({1, 1, 1, 4}, {0, 1, 0, 1}), v({1, 1, 1, 3}, {7, 8, 9});
  LayerPE<double> none;
  EXPECT_EQ(to_vec(attention_with_pe(q, k, v, none, PatchGrid{1, 1})), (std::vector<double>{7, 8, 9}));
}

TEST(AttentionWithPE, ZeroTablesMatchNoEncoding) {
  auto in = make_instance(31, {.batch = 2, .heads = 2, .rows = 3, .cols = 3, .dim = 4});
  Rng rng(5);
  auto v = TensorD::randn({2, 2, 9, 4}, rng);
  LayerPE<double> none, sape;
  sape.kind = AttentionPE::sape2;
  sape.sape_x = PositionTable<double>::zeros(4, 3);
  sape.sape_y = PositionTable<double>::zeros(4, 3);
  const auto a = attention_with_pe(in.q, in.k, v, none, in.grid);
  const auto b = attention_with_pe(in.q, in.k, v, sape, in.grid);
  EXPECT_TRUE(oracle::compare(to_vec(b), to_vec(a), 1e-12).pass);
}

TEST(AttentionWithPE, MatchesNaiveAttentionWithBruteForceBias) {
  for (BiasPlacement placement : {BiasPlacement::pre_scale, BiasPlacement::post_scale}) {
    for (double sign : {1.0, -1.0}) {
      auto in = make_instance(32, {.rows = 2, .cols = 2, .dim = 4});
      Rng rng(6);
      auto v = TensorD::randn({1, 1, 4, 3}, rng);
      LayerPE<double> pe;
      pe.kind = AttentionPE::sape2;
      pe.sape_x = in.table_x;
      pe.sape_y = in.table_y;
      const AttentionOptions opts{placement, sign};
      const auto fast = attention_with_pe(in.q, in.k, v, pe, in.grid, 0, opts);
      const auto expect = oracle::naive_attention(to_vec(in.q), to_vec(in.k), to_vec(v),
                                                  oracle::brute_force_bias(in.problem), 4, 4, 3,
                                                  placement == BiasPlacement::pre_scale, sign);
      EXPECT_TRUE(oracle::compare(to_vec(fast), expect, 1e-9).pass);
    }
  }
}

TEST(AttentionWithPE, LeadingTokenGetsZeroBias) {
  auto in = make_instance(33, {.rows = 2, .cols = 2, .dim = 4});
  Rng rng(8);
  auto cls_q = TensorD::randn({1, 1, 1, 4}, rng), cls_k = TensorD::randn({1, 1, 1, 4}, rng);
  auto q = concat(cls_q, in.q, 2), k = concat(cls_k, in.k, 2);
  auto v = TensorD::randn({1, 1, 5, 3}, rng);
  LayerPE<double> pe;
  pe.kind = AttentionPE::sape2;
  pe.sape_x = in.table_x;
  pe.sape_y = in.table_y;
  const auto fast = attention_with_pe(q, k, v, pe, in.grid, 1);
  auto patch_bias = oracle::brute_force_bias(in.problem);
  std::vector<double> bias(25, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) bias[(i + 1) * 5 + j + 1] = patch_bias[i * 4 + j];
  const auto expect = oracle::naive_attention(to_vec(q), to_vec(k), to_vec(v), bias, 5, 4, 3);
  EXPECT_TRUE(oracle::compare(to_vec(fast), expect, 1e-9).pass);
}

TEST(AttentionWithPE, RowsSumToOne) {
  auto in = make_instance(34, {.batch = 2, .heads = 3, .rows = 4, .cols = 4, .dim = 8, .qk_std = 3.0});
  const auto bias = sape2_bias(in.q, in.k, in.table_x, in.table_y, in.grid);
  const auto w = attention_weights(in.q, in.k, bias);
  for (std::size_t r = 0; r < w.numel() / 16; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 16; ++c) s += w[r * 16 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace
}  // namespace sape2
