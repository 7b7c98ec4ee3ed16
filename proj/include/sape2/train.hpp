#pragma once

// Run configuration, training loop, evaluation and the metrics log.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sape2/checkpoint.hpp"
#include "sape2/config.hpp"
#include "sape2/data.hpp"
#include "sape2/optim.hpp"
#include "sape2/vit.hpp"

namespace sape2 {

enum class Precision { float32, float64 };
enum class Schedule { constant, cosine };

struct TrainConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 128;
  std::string optimizer = "adam";
  double lr = 1e-3;
  double min_lr = 0.0;
  double weight_decay = 0.0;
  Schedule schedule = Schedule::cosine;
  std::size_t warmup_epochs = 0;
  std::uint64_t seed = 0;
  Precision precision = Precision::float32;
  bool augment = false;
  std::size_t save_interval = 0;  // 0: final checkpoint only
  std::size_t eval_interval = 1;  // 0: evaluate after the last epoch only
};

struct DataConfig {
  std::string dataset = "synthetic";  // synthetic | cifar10 | cifar100
  std::string data_dir;               // empty: $SAPE2_DATA_DIR
  std::size_t synthetic_train = 4000;
  std::size_t synthetic_eval = 1000;
  std::uint64_t synthetic_seed = 1234;
  std::size_t synthetic_copies = 3;
  std::size_t train_limit = 0;  // 0: whole split
  std::size_t eval_limit = 0;
};

struct RunConfig {
  VitConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";

  void validate() const {
    model.validate();
    if (train.optimizer != "adam") throw ConfigError("optimizer must be adam, got '" + train.optimizer + "'");
    if (train.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(train.lr > 0)) throw ConfigError("lr must be positive");
    if (data.dataset != "synthetic" && data.dataset != "cifar10" && data.dataset != "cifar100") {
      throw ConfigError("dataset must be synthetic, cifar10 or cifar100, got '" + data.dataset + "'");
    }
    if (data.dataset == "synthetic" && model.num_classes > positional_relations().size()) {
      throw ConfigError("synthetic dataset supports at most " + std::to_string(positional_relations().size()) +
                        " classes");
    }
  }

  void apply(const KeyValue& kv) {
    if (model.apply(kv)) return;
    auto& t = train;
    auto& d = data;
    const auto& k = kv.key;
    if (k == "epochs") t.epochs = parse_number<std::size_t>(kv);
    else if (k == "batch_size") t.batch_size = parse_number<std::size_t>(kv);
    else if (k == "optimizer") t.optimizer = kv.value;
    else if (k == "lr") t.lr = parse_number<double>(kv);
    else if (k == "min_lr") t.min_lr = parse_number<double>(kv);
    else if (k == "weight_decay") t.weight_decay = parse_number<double>(kv);
    else if (k == "schedule") {
      if (kv.value == "constant") t.schedule = Schedule::constant;
      else if (kv.value == "cosine") t.schedule = Schedule::cosine;
      else throw ConfigError("schedule must be constant or cosine", kv.line);
    } else if (k == "warmup_epochs") t.warmup_epochs = parse_number<std::size_t>(kv);
    else if (k == "seed") t.seed = parse_number<std::uint64_t>(kv);
    else if (k == "precision") {
      if (kv.value == "float32" || kv.value == "32") t.precision = Precision::float32;
      else if (kv.value == "float64" || kv.value == "64") t.precision = Precision::float64;
      else throw ConfigError("precision must be float32 or float64", kv.line);
    } else if (k == "augment") t.augment = parse_bool(kv);
    else if (k == "save_interval") t.save_interval = parse_number<std::size_t>(kv);
    else if (k == "eval_interval") t.eval_interval = parse_number<std::size_t>(kv);
    else if (k == "dataset") d.dataset = kv.value;
    else if (k == "data_dir") d.data_dir = kv.value;
    else if (k == "synthetic_train") d.synthetic_train = parse_number<std::size_t>(kv);
    else if (k == "synthetic_eval") d.synthetic_eval = parse_number<std::size_t>(kv);
    else if (k == "synthetic_seed") d.synthetic_seed = parse_number<std::uint64_t>(kv);
    else if (k == "synthetic_copies") d.synthetic_copies = parse_number<std::size_t>(kv);
    else if (k == "train_limit") d.train_limit = parse_number<std::size_t>(kv);
    else if (k == "eval_limit") d.eval_limit = parse_number<std::size_t>(kv);
    else if (k == "output_dir") output_dir = kv.value;
    else throw ConfigError("unknown key '" + k + "'", kv.line);
  }
};

inline RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  for (const auto& kv : parse_key_values(text)) c.apply(kv);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline std::filesystem::path resolve_data_dir(const DataConfig& d) {
  if (!d.data_dir.empty()) return d.data_dir;
  if (const char* env = std::getenv("SAPE2_DATA_DIR"); env && *env) return env;
  return "data";
}

struct DataSplits {
  Dataset train, eval;
};

inline Dataset truncated(Dataset ds, std::size_t limit) {
  if (limit == 0 || limit >= ds.size()) return ds;
  ds.labels.resize(limit);
  ds.pixels.resize(limit * ds.image_bytes());
  return ds;
}

inline SyntheticOptions synthetic_options(const RunConfig& c) {
  SyntheticOptions o;
  o.image_size = c.model.image_size;
  o.patch_size = c.model.patch_size;
  o.num_classes = c.model.num_classes;
  o.copies = c.data.synthetic_copies;
  return o;
}

inline DataSplits load_splits(const RunConfig& c) {
  DataSplits s;
  if (c.data.dataset == "synthetic") {
    const auto o = synthetic_options(c);
    s.train = synthesize_positional(c.data.synthetic_train, o, c.data.synthetic_seed, Split::train);
    s.eval = synthesize_positional(c.data.synthetic_eval, o, c.data.synthetic_seed + 1, Split::eval);
  } else {
    const auto v = c.data.dataset == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
    const auto dir = resolve_data_dir(c.data);
    s.train = load_cifar_binary(dir, v, Split::train);
    s.eval = load_cifar_binary(dir, v, Split::eval);
  }
  s.train = truncated(std::move(s.train), c.data.train_limit);
  s.eval = truncated(std::move(s.eval), c.data.eval_limit);
  if (s.train.num_classes != c.model.num_classes) {
    throw ConfigError("num_classes " + std::to_string(c.model.num_classes) + " does not match dataset '" +
                      s.train.name + "' with " + std::to_string(s.train.num_classes) + " classes");
  }
  if (s.train.height != c.model.image_size || s.train.channels != c.model.channels) {
    throw ConfigError("dataset images are " + std::to_string(s.train.height) + "px with " +
                      std::to_string(s.train.channels) + " channels; config expects " +
                      std::to_string(c.model.image_size) + "px with " + std::to_string(c.model.channels));
  }
  return s;
}

/// Standardization statistics: a sidecar beside the data is used when
/// present; otherwise they are computed from the train split and cached in
/// the output directory.
inline ChannelStats run_stats(const RunConfig& c, const Dataset& train) {
  if (c.data.dataset != "synthetic") {
    const auto beside = resolve_data_dir(c.data) / (c.data.dataset + ".stats");
    if (std::filesystem::exists(beside)) return read_stats(beside);
  }
  std::filesystem::create_directories(c.output_dir);
  return cached_channel_stats(train, std::filesystem::path(c.output_dir) / (train.name + ".stats"));
}

// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsVersionLine = "# sape2-metrics v1";
inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_top1,eval_top1,eval_top5,wall_seconds";

struct MetricsRow {
  std::size_t epoch = 0;
  double train_loss = 0, train_top1 = 0, eval_top1 = 0, eval_top5 = 0, wall_seconds = 0;
  bool evaluated = false;
};

/// Append-only CSV writer; eval columns are empty for epochs without eval.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write metrics '" + path.string() + "'");
    out_ << kMetricsVersionLine << "\n" << kMetricsHeader << "\n";
    out_.flush();
  }

  void append(const MetricsRow& r) {
    out_ << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.train_top1) << ',';
    if (r.evaluated) out_ << fmt(r.eval_top1) << ',' << fmt(r.eval_top5);
    else out_ << ',';
    out_ << ',' << std::fixed << std::setprecision(3) << r.wall_seconds << std::defaultfloat << "\n";
    out_.flush();
  }

 private:
  static std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(9) << v;
    return s.str();
  }
  std::ofstream out_;
};

struct EvalResult {
  double loss = 0, top1 = 0, top5 = 0;
  std::size_t samples = 0;
};

template <typename T>
EvalResult evaluate(const VisionTransformer<T>& model, const Dataset& ds, const ChannelStats& stats,
                    std::size_t batch_size = 256) {
  NoGradGuard guard;
  Rng unused(0);
  EvalResult r;
  const std::size_t k5 = std::min<std::size_t>(5, model.config().num_classes);
  BatchIterator it(ds.size(), batch_size, false, 0);
  for (const auto& idx : it.next_epoch()) {
    const auto x = normalize_augment<T>(ds, idx, stats, false, {}, unused);
    const auto y = ds.labels_at(idx);
    const auto logits = model.forward(x);
    const double n = static_cast<double>(idx.size());
    r.loss += static_cast<double>(cross_entropy(logits, y).item()) * n;
    r.top1 += top_k_accuracy(logits, y, 1) * n;
    r.top5 += top_k_accuracy(logits, y, k5) * n;
    r.samples += idx.size();
  }
  if (r.samples) {
    const double n = static_cast<double>(r.samples);
    r.loss /= n;
    r.top1 /= n;
    r.top5 /= n;
  }
  return r;
}

inline double scheduled_lr(const TrainConfig& t, std::size_t step, std::size_t steps_per_epoch) {
  const double total = static_cast<double>(t.epochs * steps_per_epoch);
  const double warm = static_cast<double>(t.warmup_epochs * steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warm) return t.lr * (s + 1) / warm;
  if (t.schedule == Schedule::constant || total <= warm) return t.lr;
  const double progress = (s - warm) / (total - warm);
  return t.min_lr + 0.5 * (t.lr - t.min_lr) * (1 + std::cos(std::numbers::pi * progress));
}

template <typename T>
struct TrainResult {
  VisionTransformer<T> model;
  std::vector<MetricsRow> rows;
  EvalResult final_eval;
};

/// Trains per `c`. Writes `metrics.csv` and `checkpoint.ckpt` (plus
/// `checkpoint_epoch<E>.ckpt` every save_interval epochs) under the output
/// directory. `log` receives one line per epoch.
template <typename T>
TrainResult<T> train_model(const RunConfig& c, const DataSplits& data, std::ostream* log = nullptr) {
  c.validate();
  const std::filesystem::path out(c.output_dir);
  std::filesystem::create_directories(out);
  const auto stats = run_stats(c, data.train);

  VisionTransformer<T> model(c.model, c.train.seed);
  AdamOptions ao;
  ao.lr = c.train.lr;
  ao.weight_decay = c.train.weight_decay;
  Adam<T> opt(model.parameters(), ao);
  BatchIterator batches(data.train.size(), c.train.batch_size, true, c.train.seed);
  Rng aug_rng(c.train.seed + 0x0a11ce);
  AugmentOptions aug;
  aug.enabled = c.train.augment;
  MetricsLog metrics(out / "metrics.csv");

  TrainResult<T> result{model, {}, {}};
  const auto start = std::chrono::steady_clock::now();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= c.train.epochs; ++epoch) {
    double loss_sum = 0, hit_sum = 0;
    std::size_t seen = 0;
    for (const auto& idx : batches.next_epoch()) {
      opt.set_lr(scheduled_lr(c.train, step++, batches.batches_per_epoch()));
      const auto x = normalize_augment<T>(data.train, idx, stats, true, aug, aug_rng);
      const auto y = data.train.labels_at(idx);
      const auto logits = model.forward(x);
      const auto loss = cross_entropy(logits, y);
      opt.zero_grad();
      loss.backward();
      opt.step();
      const double n = static_cast<double>(idx.size());
      loss_sum += static_cast<double>(loss.item()) * n;
      hit_sum += top_k_accuracy(logits, y, 1) * n;
      seen += idx.size();
    }
    MetricsRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(seen);
    row.train_top1 = hit_sum / static_cast<double>(seen);
    const bool last = epoch == c.train.epochs;
    if (last || (c.train.eval_interval && epoch % c.train.eval_interval == 0)) {
      const auto e = evaluate(model, data.eval, stats);
      row.evaluated = true;
      row.eval_top1 = e.top1;
      row.eval_top5 = e.top5;
      if (last) result.final_eval = e;
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics.append(row);
    result.rows.push_back(row);
    if (log) {
      *log << "epoch " << epoch << "/" << c.train.epochs << "  loss " << std::setprecision(4) << row.train_loss
           << "  train_top1 " << row.train_top1;
      if (row.evaluated) *log << "  eval_top1 " << row.eval_top1 << "  eval_top5 " << row.eval_top5;
      *log << "  (" << std::setprecision(1) << std::fixed << row.wall_seconds << "s)" << std::defaultfloat << "\n";
    }
    if (c.train.save_interval && epoch % c.train.save_interval == 0) {
      save_checkpoint((out / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt")).string(), model, epoch);
    }
  }
  if (c.train.epochs == 0) result.final_eval = evaluate(model, data.eval, stats);
  save_checkpoint((out / "checkpoint.ckpt").string(), model, c.train.epochs);
  return result;
}

}  // namespace sape2
