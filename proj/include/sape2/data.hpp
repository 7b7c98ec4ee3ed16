#pragma once

// Image datasets: CIFAR binary archives, a synthetic positional task,
// per-channel standardization with cached statistics, augmentation and
// seeded batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sape2/rng.hpp"
#include "sape2/tensor.hpp"

namespace sape2 {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, eval };
enum class CifarVariant { cifar10, cifar100 };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

/// Images kept as bytes in HWC order; pixel value = byte / 255.
struct Dataset {
  std::string name;
  Split split = Split::train;
  std::size_t height = 32, width = 32, channels = 3;
  std::size_t num_classes = 10;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return height * width * channels; }
  const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_bytes(); }
  std::uint8_t* image(std::size_t i) { return pixels.data() + i * image_bytes(); }

  void validate() const {
    if (pixels.size() != size() * image_bytes()) {
      throw DataError(name + ": " + std::to_string(pixels.size()) + " pixel bytes for " + std::to_string(size()) +
                      " images");
    }
    for (std::size_t i = 0; i < size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
        throw DataError(name + ": label " + std::to_string(labels[i]) + " at record " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }

  /// Images [B, H, W, C] in [0, 1] for the given sample indices.
  template <typename T>
  Tensor<T> images(const std::vector<std::size_t>& idx) const {
    std::vector<T> out(idx.size() * image_bytes());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto* src = image(idx[b]);
      for (std::size_t p = 0; p < image_bytes(); ++p) out[b * image_bytes() + p] = static_cast<T>(src[p]) / T{255};
    }
    return Tensor<T>({idx.size(), height, width, channels}, std::move(out));
  }

  std::vector<int> labels_at(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// CIFAR binary records: label byte(s), then 1024 R, 1024 G, 1024 B bytes.

inline constexpr std::size_t kCifarPixels = 32 * 32 * 3;

inline std::size_t cifar_label_bytes(CifarVariant v) { return v == CifarVariant::cifar10 ? 1 : 2; }
inline std::size_t cifar_classes(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

inline void append_cifar_file(Dataset& ds, const std::filesystem::path& path, CifarVariant v) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing CIFAR file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  const std::size_t rec = cifar_label_bytes(v) + kCifarPixels;
  if (bytes.size() % rec != 0) {
    throw DataError("'" + path.string() + "': " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                    std::to_string(rec) + "-byte records (truncated record)");
  }
  const std::size_t n = bytes.size() / rec;
  const std::size_t base = ds.size();
  ds.labels.resize(base + n);
  ds.pixels.resize((base + n) * kCifarPixels);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* src = bytes.data() + r * rec;
    const int label = src[cifar_label_bytes(v) - 1];
    if (static_cast<std::size_t>(label) >= ds.num_classes) {
      throw DataError("'" + path.string() + "': label " + std::to_string(label) + " at record " + std::to_string(r) +
                      " outside [0, " + std::to_string(ds.num_classes) + ")");
    }
    ds.labels[base + r] = label;
    const std::uint8_t* planes = src + cifar_label_bytes(v);
    std::uint8_t* dst = ds.image(base + r);
    for (std::size_t p = 0; p < 1024; ++p)
      for (std::size_t c = 0; c < 3; ++c) dst[p * 3 + c] = planes[c * 1024 + p];
  }
}

inline Dataset load_cifar_files(const std::vector<std::filesystem::path>& files, CifarVariant v, Split split,
                                std::string name) {
  Dataset ds;
  ds.name = std::move(name);
  ds.split = split;
  ds.num_classes = cifar_classes(v);
  for (const auto& f : files) append_cifar_file(ds, f, v);
  return ds;
}

/// Standard archive layouts: `data_batch_{1..5}.bin` / `test_batch.bin`
/// (CIFAR-10) and `train.bin` / `test.bin` (CIFAR-100), looked up in `dir`
/// and in the usual extracted subdirectory.
inline Dataset load_cifar_binary(const std::filesystem::path& dir, CifarVariant v, Split split) {
  std::vector<std::string> names;
  if (v == CifarVariant::cifar10) {
    if (split == Split::train)
      for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
    else
      names.push_back("test_batch.bin");
  } else {
    names.push_back(split == Split::train ? "train.bin" : "test.bin");
  }
  std::filesystem::path root = dir;
  const char* sub = v == CifarVariant::cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  if (!std::filesystem::exists(root / names.front()) && std::filesystem::exists(root / sub / names.front())) {
    root /= sub;
  }
  std::vector<std::filesystem::path> files;
  for (const auto& n : names) files.push_back(root / n);
  return load_cifar_files(files, v, split, v == CifarVariant::cifar10 ? "cifar10" : "cifar100");
}

inline void write_cifar_binary(const std::filesystem::path& path, const Dataset& ds, CifarVariant v) {
  if (ds.height != 32 || ds.width != 32 || ds.channels != 3) {
    throw DataError("CIFAR records hold 32x32x3 images, dataset is " + std::to_string(ds.height) + "x" +
                    std::to_string(ds.width) + "x" + std::to_string(ds.channels));
  }
  if (ds.num_classes > 256) throw DataError("labels do not fit in one byte");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  const std::size_t rec = cifar_label_bytes(v) + kCifarPixels;
  std::vector<char> buf(rec);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    buf[0] = 0;  // coarse label slot for CIFAR-100 is left at 0
    buf[cifar_label_bytes(v) - 1] = static_cast<char>(ds.labels[i]);
    const auto* src = ds.image(i);
    for (std::size_t p = 0; p < 1024; ++p)
      for (std::size_t c = 0; c < 3; ++c) buf[cifar_label_bytes(v) + c * 1024 + p] = static_cast<char>(src[p * 3 + c]);
    out.write(buf.data(), static_cast<std::streamsize>(rec));
  }
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Synthetic positional task.
//
// Each image is dark noise with a straight line of identical bright
// one-patch motifs. The class is the step between consecutive copies, read
// up to sign, so only the spatial relation separates classes: pixel
// statistics and the set of patch contents are identically distributed
// across labels.

struct Displacement {
  int dx, dy;
};

/// Generative configurations; class k uses entry k. Consecutive motifs of a
/// class sit this many patches apart.
inline const std::vector<Displacement>& positional_relations() {
  static const std::vector<Displacement> r{{1, 0}, {0, 1}, {1, 1}, {1, -1}, {2, 0}, {0, 2},
                                           {2, 2}, {2, -2}, {3, 0}, {0, 3}, {3, 3}, {3, -3}};
  return r;
}

struct SyntheticOptions {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t num_classes = 8;
  std::size_t copies = 3;
  int background_max = 100;
  int motif_min = 150;
};

inline Dataset synthesize_positional(std::size_t n, const SyntheticOptions& o, std::uint64_t seed,
                                     Split split = Split::train) {
  const auto& rel = positional_relations();
  if (o.num_classes < 1 || o.num_classes > rel.size()) {
    throw std::invalid_argument("synthetic task supports 1.." + std::to_string(rel.size()) + " classes, got " +
                                std::to_string(o.num_classes));
  }
  if (o.patch_size == 0 || o.image_size % o.patch_size != 0) {
    throw std::invalid_argument("image_size must be a multiple of patch_size");
  }
  if (o.copies < 2) throw std::invalid_argument("synthetic task needs at least 2 motif copies");
  const int g = static_cast<int>(o.image_size / o.patch_size);
  const int steps = static_cast<int>(o.copies) - 1;
  for (std::size_t k = 0; k < o.num_classes; ++k) {
    if (steps * std::abs(rel[k].dx) >= g || steps * std::abs(rel[k].dy) >= g) {
      throw std::invalid_argument("grid " + std::to_string(g) + " too small for relation " + std::to_string(k));
    }
  }
  Dataset ds;
  ds.name = "synthetic-positional";
  ds.split = split;
  ds.height = ds.width = o.image_size;
  ds.channels = 3;
  ds.num_classes = o.num_classes;
  ds.labels.resize(n);
  ds.pixels.resize(n * ds.image_bytes());
  Rng rng(seed);
  const std::size_t p = o.patch_size, w = o.image_size;
  std::vector<std::uint8_t> motif(p * p * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = i % o.num_classes;
    ds.labels[i] = static_cast<int>(k);
    auto* img = ds.image(i);
    for (std::size_t b = 0; b < ds.image_bytes(); ++b) img[b] = static_cast<std::uint8_t>(rng.below(o.background_max + 1));
    for (auto& m : motif) m = static_cast<std::uint8_t>(o.motif_min + rng.below(256 - o.motif_min));
    // first motif anywhere the whole line still fits
    const auto& d = rel[k];
    const int x0 = static_cast<int>(rng.below(g - steps * std::abs(d.dx))) + std::max(0, -steps * d.dx);
    const int y0 = static_cast<int>(rng.below(g - steps * std::abs(d.dy))) + std::max(0, -steps * d.dy);
    for (int c = 0; c <= steps; ++c) {
      const int px = x0 + c * d.dx, py = y0 + c * d.dy;
      for (std::size_t yy = 0; yy < p; ++yy)
        for (std::size_t xx = 0; xx < p; ++xx)
          for (std::size_t c = 0; c < 3; ++c)
            img[((static_cast<std::size_t>(py) * p + yy) * w + static_cast<std::size_t>(px) * p + xx) * 3 + c] =
                motif[(yy * p + xx) * 3 + c];
    }
  }
  const auto perm = rng.permutation(n);
  Dataset shuffled = ds;
  for (std::size_t i = 0; i < n; ++i) {
    shuffled.labels[i] = ds.labels[perm[i]];
    std::copy(ds.image(perm[i]), ds.image(perm[i]) + ds.image_bytes(), shuffled.image(i));
  }
  return shuffled;
}

/// Writes `<stem>.bin` in CIFAR-10 record layout plus a `<stem>.json` header
/// describing the class semantics.
inline void write_synthetic_dump(const std::filesystem::path& dir, const std::string& stem, const Dataset& ds,
                                 const SyntheticOptions& o, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_cifar_binary(dir / (stem + ".bin"), ds, CifarVariant::cifar10);
  nlohmann::json j;
  j["name"] = ds.name;
  j["split"] = to_string(ds.split);
  j["records"] = ds.size();
  j["record_layout"] = "cifar10";
  j["seed"] = seed;
  j["image_size"] = o.image_size;
  j["patch_size"] = o.patch_size;
  j["copies"] = o.copies;
  j["classes"] = nlohmann::json::array();
  for (std::size_t k = 0; k < o.num_classes; ++k) {
    const auto& d = positional_relations()[k];
    j["classes"].push_back({{"label", k}, {"dx", d.dx}, {"dy", d.dy}, {"meaning", "a line of identical motifs, consecutive copies (dx, dy) patches apart"}});
  }
  std::ofstream(dir / (stem + ".json")) << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Standardization and augmentation.

struct ChannelStats {
  std::vector<double> mean, std;
};

inline ChannelStats compute_channel_stats(const Dataset& ds) {
  ChannelStats s{std::vector<double>(ds.channels, 0.0), std::vector<double>(ds.channels, 0.0)};
  std::vector<double> sq(ds.channels, 0.0);
  const std::size_t per_channel = ds.size() * ds.height * ds.width;
  if (per_channel == 0) throw DataError("cannot compute statistics of an empty dataset");
  for (std::size_t b = 0; b < ds.pixels.size(); ++b) {
    const double v = ds.pixels[b] / 255.0;
    s.mean[b % ds.channels] += v;
    sq[b % ds.channels] += v * v;
  }
  for (std::size_t c = 0; c < ds.channels; ++c) {
    s.mean[c] /= static_cast<double>(per_channel);
    const double var = sq[c] / static_cast<double>(per_channel) - s.mean[c] * s.mean[c];
    s.std[c] = std::sqrt(std::max(var, 1e-12));
  }
  return s;
}

inline void write_stats(const std::filesystem::path& path, const ChannelStats& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write statistics '" + path.string() + "'");
  out << std::setprecision(17);
  for (std::size_t c = 0; c < s.mean.size(); ++c) out << "channel " << c << " mean " << s.mean[c] << " std " << s.std[c] << "\n";
}

inline ChannelStats read_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing statistics file '" + path.string() + "'");
  ChannelStats s;
  std::string word, mean_kw, std_kw;
  std::size_t c;
  double m, sd;
  while (in >> word >> c >> mean_kw >> m >> std_kw >> sd) {
    if (word != "channel" || mean_kw != "mean" || std_kw != "std" || c != s.mean.size()) {
      throw DataError("malformed statistics file '" + path.string() + "'");
    }
    s.mean.push_back(m);
    s.std.push_back(sd);
  }
  if (s.mean.empty()) throw DataError("empty statistics file '" + path.string() + "'");
  return s;
}

/// Reads the sidecar when present, else computes from `train` and writes it.
inline ChannelStats cached_channel_stats(const Dataset& train, const std::filesystem::path& sidecar) {
  if (std::filesystem::exists(sidecar)) {
    auto s = read_stats(sidecar);
    if (s.mean.size() == train.channels) return s;
  }
  const auto s = compute_channel_stats(train);
  write_stats(sidecar, s);
  return s;
}

struct AugmentOptions {
  bool enabled = false;
  std::size_t pad = 4;
  bool flip = true;
};

/// Mirrors [H, W, C] pixels left-right in place.
template <typename T>
void hflip(T* img, std::size_t h, std::size_t w, std::size_t c) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w / 2; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) std::swap(img[(y * w + x) * c + ch], img[(y * w + w - 1 - x) * c + ch]);
}

/// Copy of [H, W, C] pixels shifted by (dx, dy) with zero fill, the result
/// of zero-padding by `pad` and cropping at offset (pad + dx, pad + dy).
template <typename T>
void shifted_crop(const T* src, T* dst, std::size_t h, std::size_t w, std::size_t c, long dx, long dy) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(x) + dx;
      const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
      for (std::size_t ch = 0; ch < c; ++ch)
        dst[(y * w + x) * c + ch] = inside ? src[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c + ch] : T{0};
    }
}

/// Standardized [B, H, W, C] batch. With `train` and augmentation enabled,
/// each image gets a random pad-and-crop shift and a coin-flip mirror drawn
/// from `rng` (padding is applied in standardized space, i.e. zeros).
template <typename T>
Tensor<T> normalize_augment(const Dataset& ds, const std::vector<std::size_t>& idx, const ChannelStats& stats,
                            bool train, const AugmentOptions& aug, Rng& rng) {
  auto x = ds.images<T>(idx);
  const std::size_t c = ds.channels, per = ds.image_bytes();
  auto& v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<T>((static_cast<double>(v[i]) - stats.mean[i % c]) / stats.std[i % c]);
  }
  if (train && aug.enabled) {
    std::vector<T> tmp(per);
    const auto span = static_cast<std::uint64_t>(2 * aug.pad + 1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      T* img = v.data() + b * per;
      const long dx = static_cast<long>(rng.below(span)) - static_cast<long>(aug.pad);
      const long dy = static_cast<long>(rng.below(span)) - static_cast<long>(aug.pad);
      const bool mirror = aug.flip && rng.below(2) == 1;
      shifted_crop(img, tmp.data(), ds.height, ds.width, c, dx, dy);
      std::copy(tmp.begin(), tmp.end(), img);
      if (mirror) hflip(img, ds.height, ds.width, c);
    }
  }
  return x;
}

// ---------------------------------------------------------------------------

/// Epoch-wise batches of sample indices. Shuffled order for epoch e is a
/// permutation drawn from a generator seeded by (seed, e).
class BatchIterator {
 public:
  BatchIterator(std::size_t dataset_size, std::size_t batch_size, bool shuffle, std::uint64_t seed)
      : n_(dataset_size), batch_(batch_size), shuffle_(shuffle), seed_(seed) {
    if (batch_ == 0) throw std::invalid_argument("batch_size must be positive");
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

  /// Batches for the next epoch; advances the epoch counter.
  std::vector<std::vector<std::size_t>> next_epoch() {
    std::vector<std::size_t> order(n_);
    if (shuffle_) {
      Rng rng(seed_ * 0x9e3779b97f4a7c15ULL + epoch_ + 1);
      order = rng.permutation(n_);
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
    }
    ++epoch_;
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n_; s += batch_) {
      out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(std::min(n_, s + batch_)));
    }
    return out;
  }

 private:
  std::size_t n_, batch_;
  bool shuffle_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------

/// Accuracy on `eval` of a softmax-regression probe fitted on `train` using
/// only each image's per-channel mean pixel values.
inline double mean_pixel_probe_accuracy(const Dataset& train, const Dataset& eval, std::size_t steps = 500,
                                        double lr = 0.5) {
  const std::size_t c = train.channels, k = train.num_classes, f = c + 1;
  auto features = [&](const Dataset& ds) {
    std::vector<double> x(ds.size() * f, 1.0);
    const std::size_t px = ds.height * ds.width;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) x[i * f + ch] = 0.0;
      const auto* img = ds.image(i);
      for (std::size_t p = 0; p < px * c; ++p) x[i * f + p % c] += img[p] / 255.0 / static_cast<double>(px);
    }
    return x;
  };
  auto xt = features(train), xe = features(eval);
  // standardize features with train statistics
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < train.size(); ++i) m += xt[i * f + ch];
    m /= static_cast<double>(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) s += (xt[i * f + ch] - m) * (xt[i * f + ch] - m);
    s = std::sqrt(s / static_cast<double>(train.size())) + 1e-12;
    for (std::size_t i = 0; i < train.size(); ++i) xt[i * f + ch] = (xt[i * f + ch] - m) / s;
    for (std::size_t i = 0; i < eval.size(); ++i) xe[i * f + ch] = (xe[i * f + ch] - m) / s;
  }
  std::vector<double> w(f * k, 0.0), grad(f * k), prob(k);
  auto softmax_row = [&](const double* x) {
    double mx = -1e300;
    for (std::size_t j = 0; j < k; ++j) {
      prob[j] = 0;
      for (std::size_t a = 0; a < f; ++a) prob[j] += x[a] * w[a * k + j];
      mx = std::max(mx, prob[j]);
    }
    double z = 0;
    for (auto& p : prob) z += (p = std::exp(p - mx));
    for (auto& p : prob) p /= z;
  };
  for (std::size_t step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      softmax_row(&xt[i * f]);
      for (std::size_t j = 0; j < k; ++j) {
        const double g = prob[j] - (static_cast<std::size_t>(train.labels[i]) == j ? 1.0 : 0.0);
        for (std::size_t a = 0; a < f; ++a) grad[a * k + j] += g * xt[i * f + a];
      }
    }
    for (std::size_t a = 0; a < w.size(); ++a) w[a] -= lr * grad[a] / static_cast<double>(train.size());
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    softmax_row(&xe[i * f]);
    const auto best = static_cast<std::size_t>(std::max_element(prob.begin(), prob.end()) - prob.begin());
    if (best == static_cast<std::size_t>(eval.labels[i])) ++hits;
  }
  return eval.size() ? static_cast<double>(hits) / static_cast<double>(eval.size()) : 0.0;
}

}  // namespace sape2
