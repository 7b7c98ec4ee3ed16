// sape2_acceptance: runs the acceptance criteria end to end and prints one
// PASS / FAIL / SKIPPED line per criterion. Exit code 0 when every gating
// criterion passes, 1 otherwise, 2 on usage errors.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
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

#ifndef SAPE2_CONFIG_DIR
#define SAPE2_CONFIG_DIR "configs"
#endif
#ifndef SAPE2_CLI
#define SAPE2_CLI "sape2"
#endif

namespace fs = std::filesystem;
using namespace sape2;

namespace {

enum class Status { pass, fail, skipped };

struct Verdict {
  Status status = Status::fail;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double budget_seconds;  // 0: no runtime limit
  bool gating;
  std::function<Verdict()> run;
};

struct Settings {
  fs::path out = "runs/acceptance";
  fs::path configs = SAPE2_CONFIG_DIR;
  std::string cli = SAPE2_CLI;
  bool with_cifar = false;
  bool verbose = false;
};

std::string sci(double v, int digits = 2) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(digits) << v;
  return s.str();
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Verdict from_checks(const std::vector<selftest::Outcome>& outcomes) {
  Verdict v{Status::pass, ""};
  for (const auto& o : outcomes) {
    const auto& r = o.report;
    if (!v.detail.empty()) v.detail += "; ";
    v.detail += "max_rel " + sci(r.max_rel_err) + " tol " + sci(r.tolerance, 0);
    if (!o.note.empty()) v.detail += " (" + o.note + ")";
    if (!r.pass) v.status = Status::fail;
  }
  return v;
}

RunConfig config_file(const Settings& s, const std::string& name) { return load_run_config(s.configs / name); }

// ---------------------------------------------------------------------------

struct TrendRun {
  double train_top1 = 0, eval_top1 = 0;
};

TrendRun train_once(RunConfig c, const DataSplits& data, const Settings& s) {
  std::ostringstream sink;
  const auto r = train_model<float>(c, data, s.verbose ? &std::cout : &sink);
  return {r.rows.back().train_top1, r.final_eval.top1};
}

Verdict training_trend(const Settings& s) {
  const auto base = config_file(s, "synthetic_tiny.cfg");
  const auto data = load_splits(base);
  std::vector<double> none_eval, sape_eval, sape_train;
  std::ostringstream runs;
  for (std::uint64_t seed : {0, 1, 2}) {
    for (const std::string pe : {"none", "sape2+ape"}) {
      auto c = base;
      c.model.pe = pe;
      c.train.seed = seed;
      c.output_dir = (s.out / "trend" / (pe + "_seed" + std::to_string(seed))).string();
      const auto r = train_once(c, data, s);
      (pe == "none" ? none_eval : sape_eval).push_back(r.eval_top1);
      if (pe != "none") sape_train.push_back(r.train_top1);
      runs << " " << pe << "/" << seed << "=" << fixed(r.train_top1) << "," << fixed(r.eval_top1);
    }
  }
  const double gap = median(sape_eval) - median(none_eval);
  const double train = median(sape_train);
  const bool ok = gap >= 0.05 && train >= 0.90;
  return {ok ? Status::pass : Status::fail, "median eval gap " + fixed(gap) + " (need >= 0.050), sape2+ape train top1 " +
                                                fixed(train) + " (need >= 0.900); train,eval per run:" + runs.str()};
}

Verdict mode_plumbing(const Settings& s) {
  auto base = config_file(s, "synthetic_tiny.cfg");
  base.model.pe = "sape2";
  base.train.epochs = 2;
  base.train.eval_interval = 0;
  base.data.train_limit = 512;
  base.data.eval_limit = 128;
  const auto data = load_splits(base);
  std::vector<Tensor<double>> fields;
  std::string detail;
  for (const auto mode : {SapeMode::query, SapeMode::key}) {
    auto c = base;
    c.model.sape_mode = mode;
    c.output_dir = (s.out / "modes" / to_string(mode)).string();
    const auto r = train_once(c, data, s);
    if (!std::isfinite(r.train_top1)) return {Status::fail, std::string(to_string(mode)) + " training diverged"};
    const auto model = load_checkpoint<double>((fs::path(c.output_dir) / "checkpoint.ckpt").string()).model;
    const auto stats = read_stats(fs::path(c.output_dir) / (data.train.name + ".stats"));
    Image img{32, 32, 3, {data.eval.image(0), data.eval.image(0) + data.eval.image_bytes()}};
    NoGradGuard guard;
    fields.push_back(model.layer_sape2_bias(image_tensor<double>(img, stats), 0));
    detail += std::string(to_string(mode)) + " train top1 " + fixed(r.train_top1) + ", ";
  }
  double diff = 0;
  for (std::size_t i = 0; i < fields[0].numel(); ++i) diff = std::max(diff, std::abs(fields[0][i] - fields[1][i]));
  return {diff > 1e-6 ? Status::pass : Status::fail, detail + "max |bias_Q - bias_K| " + sci(diff) + " (need > 1e-6)"};
}

Verdict complexity(const Settings& s) {
  BenchOptions o;
  const auto r = run_bench(o);
  fs::create_directories(s.out);
  std::ofstream csv(s.out / "bench.csv");
  write_bench_csv(csv, r);
  bool memory_ok = true;
  for (const auto& row : r.rows) {
    const auto& m = row.memory;
    memory_ok = memory_ok && m.bias == 2 * row.tokens * row.tokens && m.bias > m.gates + m.positions + m.vectors;
  }
  const auto& last = r.rows.back().memory;
  const bool slope_ok = r.slope >= 1.8 && r.slope <= 2.6;
  return {slope_ok && memory_ok ? Status::pass : Status::fail,
          "slope " + fixed(r.slope, 2) + " (need [1.80, 2.60]) at batch " + std::to_string(o.batch) + " heads " +
              std::to_string(o.heads) + " dim " + std::to_string(o.dim) + "; bias share " + fixed(last.bias_fraction()) + " at N=" +
              std::to_string(r.rows.back().tokens) + (memory_ok ? ", 2N^2 bias dominates" : ", memory check failed")};
}

Verdict visualization(const Settings& s) {
  const auto dir = s.out / "visualize";
  fs::remove_all(dir);
  fs::create_directories(dir);
  VitConfig cfg;
  cfg.hidden_dim = 64;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.num_classes = 8;
  const VisionTransformer<double> model(cfg, 7);
  save_checkpoint((dir / "model.ckpt").string(), model);

  Rng rng(11);
  const auto synth = synthesize_positional(1, SyntheticOptions{}, 3);
  std::vector<std::pair<std::string, Image>> inputs;
  Image noise{32, 32, 3, std::vector<std::uint8_t>(32 * 32 * 3)};
  for (auto& p : noise.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  inputs.emplace_back("noise", noise);
  inputs.emplace_back("synthetic", Image{32, 32, 3, synth.pixels});
  inputs.emplace_back("constant", Image{32, 32, 3, std::vector<std::uint8_t>(32 * 32 * 3, 128)});

  double worst_roundtrip = 0, worst_self = 0;
  std::string problems;
  for (const auto& [name, img] : inputs) {
    write_pnm(dir / (name + ".ppm"), img);
    const auto out = dir / name;
    const std::string cmd = "\"" + s.cli + "\" visualize-bias \"" + (dir / "model.ckpt").string() + "\" \"" +
                            (dir / (name + ".ppm")).string() + "\" --layer 1 --head 2 --out \"" + out.string() +
                            "\" > \"" + (dir / (name + ".log")).string() + "\" 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      problems += " " + name + ": visualize-bias failed";
      continue;
    }
    std::size_t maps = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      const auto gray = read_pnm(out / (map_stem(i, 64) + ".pgm"));
      const auto color = read_pnm(out / (map_stem(i, 64) + ".ppm"));
      maps += gray.width == 8 && gray.height == 8 && color.width == 8 && color.height == 8;
    }
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(out)) files += e.path().extension() == ".pgm";
    if (maps != 64 || files != 64) problems += " " + name + ": " + std::to_string(files) + " maps";

    std::size_t n = 0;
    const auto csv = read_matrix_csv(out / "bias.csv", &n);
    if (n != 64) {
      problems += " " + name + ": csv is " + std::to_string(n) + "x" + std::to_string(n);
      continue;
    }
    ChannelStats identity{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};
    NoGradGuard guard;
    const auto field = model.layer_sape2_bias(image_tensor<double>(img, identity), 1);
    for (std::size_t i = 0; i < n; ++i) {
      worst_self = std::max(worst_self, std::abs(csv[i * n + i]));
      for (std::size_t j = 0; j < n; ++j) {
        worst_roundtrip = std::max(worst_roundtrip, std::abs(csv[i * n + j] - field[(2 * n + i) * n + j]));
      }
    }
  }
  const bool ok = problems.empty() && worst_self == 0.0 && worst_roundtrip <= 1e-6;
  return {ok ? Status::pass : Status::fail,
          "64 maps of 8x8 per input (noise, synthetic, constant); max |self cell| " + sci(worst_self) +
              "; csv round trip " + sci(worst_roundtrip) + " (tol 1e-06)" + problems};
}

Verdict cifar_direction(const Settings& s) {
  auto base = config_file(s, "cifar10_tiny.cfg");
  const auto dir = resolve_data_dir(base.data);
  if (!fs::exists(dir / "data_batch_1.bin") || !fs::exists(dir / "test_batch.bin")) {
    return {Status::skipped, "no CIFAR-10 binaries under '" + dir.string() + "'"};
  }
  if (!s.with_cifar) return {Status::skipped, "CIFAR-10 found; pass --with-cifar to run 6 x 50 epochs"};
  const auto data = load_splits(base);
  std::vector<double> ape, sape;
  for (std::uint64_t seed : {0, 1, 2}) {
    for (const std::string pe : {"ape", "sape2+ape"}) {
      auto c = base;
      c.model.pe = pe;
      c.train.seed = seed;
      c.output_dir = (s.out / "cifar10" / (pe + "_seed" + std::to_string(seed))).string();
      (pe == "ape" ? ape : sape).push_back(train_once(c, data, s).eval_top1);
    }
  }
  const double gap = median(sape) - median(ape);
  return {gap >= 0.01 ? Status::pass : Status::fail, "median eval gap " + fixed(gap) + " (need >= 0.010)"};
}

// ---------------------------------------------------------------------------

std::vector<Criterion> criteria(const Settings& s) {
  using namespace selftest;
  return {
      {1, "path equivalence", 10, true, [] { return from_checks({check_path_equivalence(100)}); }},
      {2, "brute-force bias", 30, true, [] { return from_checks({check_brute_force_bias(20)}); }},
      {3, "saturated gates", 1, true, [] { return from_checks({check_saturated_positions()}); }},
      {4, "gradients", 60, true, [] { return from_checks({check_sape2_gradients()}); }},
      {5, "metric axioms", 0, true, [] { return from_checks({check_metric_axioms(10, 1000)}); }},
      {6, "invariants", 0, true,
       [] { return from_checks({check_gates_and_positions(), check_attention_rows(), check_zero_table_model()}); }},
      {7, "training trend", 1800, true, [&s] { return training_trend(s); }},
      {8, "mode plumbing", 0, true, [&s] { return mode_plumbing(s); }},
      {9, "complexity bench", 300, true, [&s] { return complexity(s); }},
      {10, "visualization", 0, true, [&s] { return visualization(s); }},
      {11, "cifar-10 direction", 0, false, [&s] { return cifar_direction(s); }},
  };
}

const char* label(Status st) {
  switch (st) {
    case Status::pass:
      return "PASS";
    case Status::fail:
      return "FAIL";
    default:
      return "SKIPPED";
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  Settings s;
  std::vector<int> only;
  CLI::App app{"Acceptance criteria for the sape2 library and CLI"};
  app.add_option("--out", s.out, "Directory for runs and artifacts");
  app.add_option("--config-dir", s.configs, "Directory holding synthetic_tiny.cfg and cifar10_tiny.cfg");
  app.add_option("--cli", s.cli, "Path to the sape2 executable");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_flag("--with-cifar", s.with_cifar, "Run criterion 11 when CIFAR-10 is available");
  app.add_flag("-v,--verbose", s.verbose, "Print per-epoch training logs");
  CLI11_PARSE(app, argc, argv);

  std::size_t failed = 0, run = 0;
  for (const auto& c : criteria(s)) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++run;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {Status::fail, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (v.status == Status::pass && c.budget_seconds > 0 && secs > c.budget_seconds) {
      v.status = Status::fail;
      v.detail += "; over the " + fixed(c.budget_seconds, 0) + " s budget";
    }
    if (v.status == Status::fail && c.gating) ++failed;
    std::cout << "criterion " << std::setw(2) << c.id << "  " << std::left << std::setw(7) << label(v.status) << "  "
              << std::setw(20) << c.title << std::right << std::setw(9) << fixed(secs, 1) << " s  " << v.detail
              << (c.gating ? "" : "  [non-gating]") << std::endl;
  }
  std::cout << (failed ? "FAILED: " : "OK: ") << failed << " of " << run << " criteria failed\n";
  return failed ? 1 : 0;
}
