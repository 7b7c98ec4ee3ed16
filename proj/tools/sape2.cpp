// sape2: train, evaluate, visualize and benchmark Vision Transformers with
// semantic-aware 2D position encodings.
//
// Exit codes: 0 success, 1 failed checks or runtime failure, 2 usage or
// configuration error.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sape2/bench.hpp"
#include "sape2/checkpoint.hpp"
#include "sape2/runtime.hpp"
#include "sape2/selftest.hpp"
#include "sape2/train.hpp"
#include "sape2/visualize.hpp"

#ifndef SAPE2_GOLDEN_DIR
#define SAPE2_GOLDEN_DIR "tests/golden"
#endif

namespace fs = std::filesystem;
using namespace sape2;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

/// Errors in user input: bad config, checkpoint, dataset or image.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config file (optional) followed by `key=value` overrides.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!path.empty()) c = load_run_config(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    for (const auto& kv : parse_key_values(o.substr(0, eq) + " = " + o.substr(eq + 1))) c.apply(kv);
  }
  c.validate();
  return c;
}

void add_override(RunConfig& c, const std::string& key, const std::string& value) {
  c.apply(KeyValue{key, value, 0});
  c.validate();
}

std::string stats_name(const RunConfig& c) {
  return (c.data.dataset == "synthetic" ? std::string("synthetic-positional") : c.data.dataset) + ".stats";
}

/// Explicit file, else the dataset's sidecar beside the checkpoint, else
/// statistics of the train split.
ChannelStats resolve_stats(const std::string& explicit_path, const fs::path& checkpoint_dir, const RunConfig& c,
                           const Dataset& train) {
  if (!explicit_path.empty()) return read_stats(explicit_path);
  const auto beside = checkpoint_dir / stats_name(c);
  if (fs::exists(beside)) return read_stats(beside);
  return compute_channel_stats(train);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> set;
  std::string pe, bias_sign, output_dir;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  auto c = load_config(a.config, a.set);
  if (!a.pe.empty()) add_override(c, "pe", a.pe);
  if (!a.bias_sign.empty()) add_override(c, "bias_sign", a.bias_sign);
  if (!a.output_dir.empty()) c.output_dir = a.output_dir;
  const auto data = load_splits(c);
  std::cout << "training pe=" << c.model.pe << " on " << data.train.name << " (" << data.train.size() << " train, "
            << data.eval.size() << " eval) for " << c.train.epochs << " epochs into " << c.output_dir << "\n";
  std::ostream* log = a.quiet ? nullptr : &std::cout;
  EvalResult e;
  if (c.train.precision == Precision::float64) e = train_model<double>(c, data, log).final_eval;
  else e = train_model<float>(c, data, log).final_eval;
  std::cout << "final eval_top1 " << e.top1 << " eval_top5 " << e.top5 << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, config, split = "eval", stats, out;
  std::vector<std::string> set;
};

int cmd_eval(const EvalArgs& a) {
  auto loaded = load_checkpoint<float>(a.checkpoint);
  auto c = load_config(a.config, a.set);
  c.model = loaded.header.config;
  c.validate();
  const auto data = load_splits(c);
  const auto stats = resolve_stats(a.stats, fs::path(a.checkpoint).parent_path(), c, data.train);
  const auto& ds = a.split == "train" ? data.train : data.eval;
  const auto r = evaluate(loaded.model, ds, stats);
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() : fs::path(a.out);
  if (!out.empty()) fs::create_directories(out);
  const auto csv = out / "eval.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream f(csv, std::ios::app);
  if (!f) throw std::runtime_error("cannot write '" + csv.string() + "'");
  if (fresh) f << "checkpoint,epoch,dataset,split,samples,loss,top1,top5\n";
  f << a.checkpoint << ',' << loaded.header.epoch << ',' << ds.name << ',' << a.split << ',' << r.samples << ','
    << std::setprecision(9) << r.loss << ',' << r.top1 << ',' << r.top5 << "\n";
  std::cout << "samples " << r.samples << "  loss " << r.loss << "  top1 " << r.top1 << "  top5 " << r.top5 << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct VisualizeArgs {
  std::string checkpoint, image, out, stats, config;
  std::size_t layer = 0, head = 0, upscale = 1;
};

int cmd_visualize(const VisualizeArgs& a) {
  auto loaded = load_checkpoint<double>(a.checkpoint);
  const auto& cfg = loaded.header.config;
  if (cfg.pe_choice().attention != AttentionPE::sape2) {
    throw UsageError("checkpoint uses pe=" + cfg.pe + "; visualize-bias needs a SaPE2 model");
  }
  if (a.layer >= cfg.depth) throw UsageError("layer " + std::to_string(a.layer) + " out of range (depth " + std::to_string(cfg.depth) + ")");
  if (a.head >= cfg.heads) throw UsageError("head " + std::to_string(a.head) + " out of range (" + std::to_string(cfg.heads) + " heads)");
  const auto img = read_pnm(a.image);
  if (img.width != cfg.image_size || img.height != cfg.image_size) {
    throw UsageError("image is " + std::to_string(img.width) + "x" + std::to_string(img.height) + "; the model expects " +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  RunConfig c = load_config(a.config, {});
  c.model = cfg;
  const auto beside = fs::path(a.checkpoint).parent_path() / stats_name(c);
  ChannelStats stats{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};
  if (!a.stats.empty()) stats = read_stats(a.stats);
  else if (fs::exists(beside)) stats = read_stats(beside);
  else if (!a.config.empty()) stats = compute_channel_stats(load_splits(c).train);
  NoGradGuard guard;
  const auto field = loaded.model.layer_sape2_bias(image_tensor<double>(img, stats), a.layer);
  const std::size_t n = cfg.grid().tokens();
  const std::vector<double> head(field.values().begin() + static_cast<long>(a.head * n * n),
                                 field.values().begin() + static_cast<long>((a.head + 1) * n * n));
  const auto maps = write_bias_maps(a.out, head, cfg.grid(), a.upscale);
  std::cout << "wrote " << maps << " maps of " << cfg.grid().rows << "x" << cfg.grid().cols << " cells and bias.csv to "
            << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  BenchOptions opts;
  std::string out = "runs/bench";
};

int cmd_bench(const BenchArgs& a) {
  const auto r = run_bench(a.opts, &std::cout);
  fs::create_directories(a.out);
  std::ofstream f(fs::path(a.out) / "bench.csv");
  if (!f) throw std::runtime_error("cannot write bench.csv under '" + a.out + "'");
  write_bench_csv(f, r);
  std::cout << "\n";
  write_bench_csv(std::cout, r);
  std::cout << "log-log slope " << std::setprecision(3) << r.slope << " over " << r.rows.size() << " sizes, threads "
            << r.threads_used << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_selftest(const std::string& golden_dir, const std::string& filter) {
  auto checks = selftest::default_checks(golden_dir);
  if (!filter.empty()) {
    std::erase_if(checks, [&](const selftest::Check& c) {
      return c.module.find(filter) == std::string::npos && c.name.find(filter) == std::string::npos;
    });
  }
  return selftest::run_suite(checks, std::cout) ? kFailure : kOk;
}

// ---------------------------------------------------------------------------

struct DumpArgs {
  std::string config, out;
  std::vector<std::string> set;
  std::size_t images = 8;
};

int cmd_dump(const DumpArgs& a) {
  const auto c = load_config(a.config, a.set);
  if (c.data.dataset != "synthetic") throw UsageError("dump-synthetic needs dataset = synthetic");
  const auto o = synthetic_options(c);
  const auto data = load_splits(c);
  write_synthetic_dump(a.out, "train", data.train, o, c.data.synthetic_seed);
  write_synthetic_dump(a.out, "eval", data.eval, o, c.data.synthetic_seed + 1);
  for (std::size_t i = 0; i < std::min(a.images, data.eval.size()); ++i) {
    Image img{data.eval.width, data.eval.height, 3,
              {data.eval.image(i), data.eval.image(i) + data.eval.image_bytes()}};
    write_pnm(fs::path(a.out) / ("eval_" + std::to_string(i) + "_label" + std::to_string(data.eval.labels[i]) + ".ppm"), img);
  }
  std::cout << "wrote " << data.train.size() << " train and " << data.eval.size() << " eval records to " << a.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Vision Transformers with semantic-aware 2D position encodings"};
  app.require_subcommand(1);
  const std::string pe_values = "none|ape|ape-sin|rpe|rope2d|cope|sape2|sape2+ape|cope+ape|rope2d+ape";

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model from a key = value config");
  train->add_option("config", ta.config, "config file")->check(CLI::ExistingFile);
  train->add_option("--set", ta.set, "key=value override, repeatable");
  train->add_option("--pe", ta.pe, "position encoding: " + pe_values);
  train->add_option("--bias-sign", ta.bias_sign, "sign of the additive bias (+ or -)");
  train->add_option("--output-dir", ta.output_dir, "overrides output_dir");
  train->add_flag("--quiet", ta.quiet, "no per-epoch log");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; appends top-1/top-5 to eval.csv");
  eval->add_option("checkpoint", ea.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", ea.config, "run config naming the dataset")->check(CLI::ExistingFile);
  eval->add_option("--set", ea.set, "key=value override, repeatable");
  eval->add_option("--split", ea.split, "train or eval")->check(CLI::IsMember({"train", "eval"}));
  eval->add_option("--stats", ea.stats, "channel statistics file");
  eval->add_option("--out", ea.out, "directory for eval.csv (default: the checkpoint's)");

  VisualizeArgs va;
  auto* vis = app.add_subcommand("visualize-bias", "render every patch's row of a SaPE2 bias field");
  vis->add_option("checkpoint", va.checkpoint, "SaPE2 checkpoint")->required()->check(CLI::ExistingFile);
  vis->add_option("image", va.image, "input PPM/PGM image")->required()->check(CLI::ExistingFile);
  vis->add_option("--layer", va.layer, "block index");
  vis->add_option("--head", va.head, "head index");
  vis->add_option("--out", va.out, "output directory")->required();
  vis->add_option("--upscale", va.upscale, "pixels per patch cell")->check(CLI::PositiveNumber);
  vis->add_option("--stats", va.stats, "channel statistics file");
  vis->add_option("--config", va.config, "run config, for statistics of its train split")->check(CLI::ExistingFile);

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time the SaPE2 bias against the token count");
  bench->add_option("--sizes", ba.opts.sizes, "token counts (square grids)")->delimiter(',');
  bench->add_option("--dim", ba.opts.dim, "head dim")->check(CLI::PositiveNumber);
  bench->add_option("--heads", ba.opts.heads, "heads")->check(CLI::PositiveNumber);
  bench->add_option("--batch", ba.opts.batch, "images per call")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", ba.opts.repeats, "timed samples per size")->check(CLI::PositiveNumber);
  bench->add_option("--threads", ba.opts.threads, "kernel threads")->check(CLI::PositiveNumber);
  bench->add_option("--out", ba.out, "directory for bench.csv");

  std::string golden_dir = SAPE2_GOLDEN_DIR, filter;
  auto* self = app.add_subcommand("selftest", "run the oracle and invariant suite");
  self->add_option("--golden-dir", golden_dir, "directory holding the golden files");
  self->add_option("--filter", filter, "only checks whose module or name contains this");

  DumpArgs da;
  auto* dump = app.add_subcommand("dump-synthetic", "write the synthetic dataset in CIFAR record layout");
  dump->add_option("config", da.config, "config file")->check(CLI::ExistingFile);
  dump->add_option("--set", da.set, "key=value override, repeatable");
  dump->add_option("--out", da.out, "output directory")->required();
  dump->add_option("--images", da.images, "eval images also written as PPM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*vis) return cmd_visualize(va);
    if (*bench) return cmd_bench(ba);
    if (*self) return cmd_selftest(golden_dir, filter);
    if (*dump) return cmd_dump(da);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kUsage;
  } catch (const ImageError& e) {
    std::cerr << "image error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
