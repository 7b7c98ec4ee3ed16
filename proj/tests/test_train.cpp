#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "sape2/train.hpp"

namespace sape2 {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = fs::temp_directory_path() / ("sape2_train_" + std::string(info->test_suite_name()) + "_" + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_run(const fs::path& out, std::size_t epochs = 2) {
  std::ostringstream s;
  s << "hidden_dim = 16\ndepth = 1\nheads = 2\nnum_classes = 8\n"
    << "epochs = " << epochs << "\nbatch_size = 16\nseed = 3\n"
    << "synthetic_train = 48\nsynthetic_eval = 24\n"
    << "output_dir = " << out.string() << "\n";
  return parse_run_config(s.str());
}

std::vector<std::string> lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Drops the trailing wall_seconds column.
std::string without_wall_time(const std::string& row) { return row.substr(0, row.rfind(',')); }

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(RunConfigParse, FullFile) {
  const auto c = parse_run_config(
      "# tiny\npe = rope2d\nhidden_dim = 32\nheads = 2\ndepth = 2\n"
      "epochs = 7   # short\nlr = 3e-4\nschedule = constant\nprecision = float64\n"
      "augment = true\ndataset = cifar100\nnum_classes = 100\noutput_dir = runs/x\n");
  EXPECT_EQ(c.model.pe, "rope2d");
  EXPECT_EQ(c.model.hidden_dim, 32u);
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_DOUBLE_EQ(c.train.lr, 3e-4);
  EXPECT_EQ(c.train.schedule, Schedule::constant);
  EXPECT_EQ(c.train.precision, Precision::float64);
  EXPECT_TRUE(c.train.augment);
  EXPECT_EQ(c.data.dataset, "cifar100");
  EXPECT_EQ(c.output_dir, "runs/x");
}

TEST(RunConfigParse, ErrorsCarryTheLine) {
  try {
    parse_run_config("epochs = 3\n\nwidth = 4\n");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
  try {
    parse_run_config("# header\nlr = fast\n");
    FAIL() << "bad number accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    parse_run_config("pe = sape2\npe = rope3d\n");
    FAIL() << "bad encoding accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_run_config("epochs 3\n"), ConfigError);
}

TEST(RunConfigParse, Validation) {
  EXPECT_THROW(parse_run_config("batch_size = 0\n"), ConfigError);
  EXPECT_THROW(parse_run_config("dataset = mnist\n"), ConfigError);
  EXPECT_THROW(parse_run_config("optimizer = sgd\n"), ConfigError);
  EXPECT_THROW(parse_run_config("num_classes = 13\n"), ConfigError);
  EXPECT_THROW(parse_run_config("hidden_dim = 30\nheads = 4\n"), std::exception);
}

TEST(RunConfigParse, LoadFileAndDataDirResolution) {
  const auto dir = scratch_dir();
  std::ofstream(dir / "run.cfg") << "epochs = 1\nbogus = 2\n";
  try {
    load_run_config(dir / "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(load_run_config(dir / "missing.cfg"), ConfigError);

  DataConfig d;
  d.data_dir = "explicit";
  EXPECT_EQ(resolve_data_dir(d), fs::path("explicit"));
  d.data_dir.clear();
  ::setenv("SAPE2_DATA_DIR", "/from/env", 1);
  EXPECT_EQ(resolve_data_dir(d), fs::path("/from/env"));
  ::unsetenv("SAPE2_DATA_DIR");
  EXPECT_EQ(resolve_data_dir(d), fs::path("data"));
}

TEST(Schedule, WarmupThenCosine) {
  TrainConfig t;
  t.epochs = 10;
  t.lr = 1.0;
  t.min_lr = 0.1;
  t.warmup_epochs = 2;
  EXPECT_DOUBLE_EQ(scheduled_lr(t, 0, 5), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(t, 9, 5), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(t, 10, 5), 1.0);
  EXPECT_NEAR(scheduled_lr(t, 30, 5), 0.55, 1e-12);
  EXPECT_NEAR(scheduled_lr(t, 49, 5), 0.1 + 0.45 * (1 + std::cos(std::numbers::pi * 39.0 / 40.0)), 1e-12);
  t.schedule = Schedule::constant;
  EXPECT_DOUBLE_EQ(scheduled_lr(t, 40, 5), 1.0);
}

TEST(Splits, SyntheticAndClassMismatch) {
  const auto dir = scratch_dir();
  const auto c = tiny_run(dir);
  const auto s = load_splits(c);
  EXPECT_EQ(s.train.size(), 48u);
  EXPECT_EQ(s.eval.size(), 24u);
  EXPECT_NE(s.train.pixels, s.eval.pixels);

  const auto data = dir / "cifar";
  fs::create_directories(data);
  Dataset tiny = synthesize_positional(4, SyntheticOptions{}, 1);
  write_cifar_binary(data / "test_batch.bin", tiny, CifarVariant::cifar10);
  for (int i = 1; i <= 5; ++i) write_cifar_binary(data / ("data_batch_" + std::to_string(i) + ".bin"), tiny, CifarVariant::cifar10);
  auto cifar = c;
  cifar.data.dataset = "cifar10";
  cifar.data.data_dir = data.string();
  EXPECT_THROW(load_splits(cifar), ConfigError);
  cifar.model.num_classes = 10;
  cifar.data.train_limit = 7;
  const auto loaded = load_splits(cifar);
  EXPECT_EQ(loaded.train.size(), 7u);
  EXPECT_EQ(loaded.eval.size(), 4u);
}

TEST(Trainer, MetricsFileLayout) {
  const auto dir = scratch_dir();
  auto c = tiny_run(dir, 3);
  c.train.eval_interval = 2;
  const auto r = train_model<float>(c, load_splits(c));
  const auto l = lines(dir / "metrics.csv");
  ASSERT_EQ(l.size(), 5u);
  EXPECT_EQ(l[0], kMetricsVersionLine);
  EXPECT_EQ(l[1], kMetricsHeader);
  EXPECT_EQ(l[2].rfind("1,", 0), 0u);
  EXPECT_NE(l[2].find(",,,"), std::string::npos) << l[2];
  EXPECT_EQ(l[3].find(",,,"), std::string::npos) << l[3];
  EXPECT_EQ(l[4].find(",,,"), std::string::npos) << l[4];
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_FALSE(r.rows[0].evaluated);
  EXPECT_TRUE(r.rows[2].evaluated);
  EXPECT_EQ(r.final_eval.samples, 24u);
  EXPECT_GE(r.final_eval.top5, r.final_eval.top1);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "synthetic-positional.stats"));
}

TEST(Trainer, RunsAreReproducibleExceptWallTime) {
  const auto a = scratch_dir() / "a";
  const auto b = a.parent_path() / "b";
  for (const auto& out : {a, b}) {
    const auto c = tiny_run(out);
    train_model<float>(c, load_splits(c));
  }
  const auto la = lines(a / "metrics.csv"), lb = lines(b / "metrics.csv");
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(without_wall_time(la[i]), without_wall_time(lb[i]));
  EXPECT_EQ(file_bytes(a / "checkpoint.ckpt"), file_bytes(b / "checkpoint.ckpt"));
}

TEST(Trainer, ZeroEpochsSavesTheInitialization) {
  const auto dir = scratch_dir();
  const auto c = tiny_run(dir, 0);
  const auto r = train_model<double>(c, load_splits(c));
  EXPECT_TRUE(r.rows.empty());
  EXPECT_EQ(r.final_eval.samples, 24u);
  const auto loaded = load_checkpoint<double>((dir / "checkpoint.ckpt").string());
  EXPECT_EQ(loaded.header.epoch, 0u);
  EXPECT_EQ(loaded.header.config, c.model);
  const VisionTransformer<double> fresh(c.model, c.train.seed);
  const auto want = fresh.parameters(), got = loaded.model.parameters();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[i].numel(); ++j)
      ASSERT_EQ(got[i][j], static_cast<double>(static_cast<float>(want[i][j])));
}

TEST(Trainer, PeriodicCheckpointsAndTrainedWeightsMove) {
  const auto dir = scratch_dir();
  auto c = tiny_run(dir, 2);
  c.train.save_interval = 1;
  const auto r = train_model<float>(c, load_splits(c));
  EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch1.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch2.ckpt"));
  EXPECT_EQ(file_bytes(dir / "checkpoint_epoch2.ckpt"), file_bytes(dir / "checkpoint.ckpt"));
  EXPECT_NE(file_bytes(dir / "checkpoint_epoch1.ckpt"), file_bytes(dir / "checkpoint.ckpt"));
  const auto loaded = load_checkpoint<float>((dir / "checkpoint.ckpt").string());
  EXPECT_EQ(loaded.header.epoch, 2u);
  const auto trained = r.model.parameters(), back = loaded.model.parameters();
  for (std::size_t i = 0; i < trained.size(); ++i) EXPECT_EQ(trained[i].values(), back[i].values());
}

TEST(Evaluate, CountsEverySampleAndBoundsAccuracy) {
  const auto dir = scratch_dir();
  const auto c = tiny_run(dir);
  const auto s = load_splits(c);
  const VisionTransformer<float> model(c.model, 0);
  const auto stats = compute_channel_stats(s.train);
  const auto e = evaluate(model, s.eval, stats, 5);
  EXPECT_EQ(e.samples, 24u);
  EXPECT_GE(e.top1, 0.0);
  EXPECT_LE(e.top1, e.top5);
  EXPECT_LE(e.top5, 1.0);
  EXPECT_NEAR(e.loss, std::log(8.0), 0.5);
  const auto whole = evaluate(model, s.eval, stats, 256);
  EXPECT_NEAR(whole.loss, e.loss, 1e-5);
  EXPECT_DOUBLE_EQ(whole.top1, e.top1);
}

}  // namespace sape2
