#pragma once

// Netpbm image input and output, and per-patch renderings of a SaPE2 bias
// field: row i of the N x N field reshaped onto the patch grid.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sape2/data.hpp"
#include "sape2/grid.hpp"
#include "sape2/tensor.hpp"

namespace sape2 {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit image, HWC order.
struct Image {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

// Next header token, skipping whitespace and `#` comments.
inline std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

inline std::size_t pnm_number(std::istream& in, const std::string& path) {
  const auto tok = pnm_token(in);
  try {
    std::size_t used = 0;
    const auto v = std::stoul(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ImageError("'" + path + "': malformed header field '" + tok + "'");
  }
}

}  // namespace detail

/// Reads PGM or PPM, plain (P2/P3) or binary (P5/P6), maxval up to 255.
/// Grayscale images are replicated to three channels.
inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image '" + path.string() + "'");
  const auto magic = detail::pnm_token(in);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw ImageError("'" + path.string() + "' is not a PGM/PPM image");
  }
  Image img;
  img.width = detail::pnm_number(in, path.string());
  img.height = detail::pnm_number(in, path.string());
  const auto maxval = detail::pnm_number(in, path.string());
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 255) {
    throw ImageError("'" + path.string() + "': unsupported size or maxval");
  }
  const bool color = magic == "P3" || magic == "P6";
  const std::size_t count = img.width * img.height * (color ? 3 : 1);
  std::vector<std::uint8_t> raw(count);
  if (magic == "P5" || magic == "P6") {
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) throw ImageError("'" + path.string() + "': truncated pixels");
  } else {
    for (auto& v : raw) {
      const auto x = detail::pnm_number(in, path.string());
      if (x > maxval) throw ImageError("'" + path.string() + "': sample above maxval");
      v = static_cast<std::uint8_t>(x);
    }
  }
  if (maxval != 255) {
    for (auto& v : raw) v = static_cast<std::uint8_t>(std::lround(v * 255.0 / static_cast<double>(maxval)));
  }
  img.channels = 3;
  if (color) {
    img.pixels = std::move(raw);
  } else {
    img.pixels.resize(count * 3);
    for (std::size_t i = 0; i < count; ++i) img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = raw[i];
  }
  return img;
}

/// Binary PGM (channels 1) or PPM (channels 3).
inline void write_pnm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("write_pnm: 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw ImageError("write_pnm: pixel count");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write image '" + path.string() + "'");
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

/// Standardized [1, H, W, C] model input.
template <typename T>
Tensor<T> image_tensor(const Image& img, const ChannelStats& stats) {
  if (stats.mean.size() != img.channels) throw ImageError("statistics do not match the image channels");
  Tensor<T> x({1, img.height, img.width, img.channels});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::size_t c = i % img.channels;
    x[i] = static_cast<T>((img.pixels[i] / 255.0 - stats.mean[c]) / stats.std[c]);
  }
  return x;
}

// ---------------------------------------------------------------------------

/// Color of a bias value on [0, top]: white at 0, green at top.
inline std::array<std::uint8_t, 3> white_to_green(double v, double top) {
  const double t = top > 0 ? std::clamp(v / top, 0.0, 1.0) : 0.0;
  auto ch = [t](double hi) { return static_cast<std::uint8_t>(std::lround(255.0 + t * (hi - 255.0))); };
  return {ch(0.0), ch(128.0), ch(0.0)};
}

/// Row `i` of an N x N field on the patch grid, each cell `upscale` pixels
/// wide. Returns the grayscale (0 at zero, 255 at the row maximum) and
/// white-to-green renderings.
inline std::pair<Image, Image> render_bias_row(const std::vector<double>& field, const PatchGrid& grid,
                                               std::size_t i, std::size_t upscale = 1) {
  const std::size_t n = grid.tokens();
  if (field.size() != n * n) throw std::invalid_argument("bias field is not N x N for the grid");
  const double* row = field.data() + i * n;
  const double top = *std::max_element(row, row + n);
  Image gray{grid.cols * upscale, grid.rows * upscale, 1, {}}, color{grid.cols * upscale, grid.rows * upscale, 3, {}};
  gray.pixels.resize(gray.width * gray.height);
  color.pixels.resize(gray.pixels.size() * 3);
  for (std::size_t py = 0; py < gray.height; ++py)
    for (std::size_t px = 0; px < gray.width; ++px) {
      const double v = row[grid.index(px / upscale, py / upscale)];
      const std::size_t o = py * gray.width + px;
      gray.pixels[o] = static_cast<std::uint8_t>(std::lround(top > 0 ? 255.0 * std::clamp(v / top, 0.0, 1.0) : 0.0));
      const auto rgb = white_to_green(v, top);
      std::copy(rgb.begin(), rgb.end(), color.pixels.begin() + static_cast<long>(3 * o));
    }
  return {gray, color};
}

inline void write_matrix_csv(const std::filesystem::path& path, const std::vector<double>& m, std::size_t n) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << m[i * n + j];
    out << "\n";
  }
}

/// Reads a square numeric CSV written by write_matrix_csv.
inline std::vector<double> read_matrix_csv(const std::filesystem::path& path, std::size_t* n_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::size_t c = 0;
    for (std::string cell; std::getline(ss, cell, ',');) {
      values.push_back(std::stod(cell));
      ++c;
    }
    if (rows == 0) cols = c;
    if (c != cols) throw std::runtime_error("'" + path.string() + "': ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  if (rows != cols) throw std::runtime_error("'" + path.string() + "' is not square");
  if (n_out) *n_out = rows;
  return values;
}

inline std::string map_stem(std::size_t i, std::size_t n) {
  const auto width = std::to_string(n - 1).size();
  std::ostringstream s;
  s << "map_" << std::setw(static_cast<int>(width)) << std::setfill('0') << i;
  return s.str();
}

/// Writes `map_<i>.pgm` and `map_<i>.ppm` for every patch i plus
/// `bias.csv` (the full field) into `dir`. Returns the number of maps.
inline std::size_t write_bias_maps(const std::filesystem::path& dir, const std::vector<double>& field,
                                   const PatchGrid& grid, std::size_t upscale = 1) {
  std::filesystem::create_directories(dir);
  const std::size_t n = grid.tokens();
  for (std::size_t i = 0; i < n; ++i) {
    const auto [gray, color] = render_bias_row(field, grid, i, upscale);
    write_pnm(dir / (map_stem(i, n) + ".pgm"), gray);
    write_pnm(dir / (map_stem(i, n) + ".ppm"), color);
  }
  write_matrix_csv(dir / "bias.csv", field, n);
  return n;
}

}  // namespace sape2
