#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace sape2 {

/// Geometry of a patch grid. Tokens are raster ordered, x fastest, so token
/// i sits at column i % cols and row i / cols. Coordinates are 0-based.
struct PatchGrid {
  std::size_t rows = 1;  // H, patches along y
  std::size_t cols = 1;  // W, patches along x

  static PatchGrid from_image(std::size_t image_h, std::size_t image_w, std::size_t patch) {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
      throw std::invalid_argument("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                  " is not divisible into " + std::to_string(patch) + "px patches");
    }
    return {image_h / patch, image_w / patch};
  }

  std::size_t tokens() const { return rows * cols; }
  std::size_t x(std::size_t i) const { return i % cols; }
  std::size_t y(std::size_t i) const { return i / cols; }
  std::pair<std::size_t, std::size_t> coord(std::size_t i) const { return {x(i), y(i)}; }
  std::size_t index(std::size_t x, std::size_t y) const { return y * cols + x; }

  bool operator==(const PatchGrid&) const = default;
};

enum class Axis { x, y };

/// Which projection of a patch reads the position table.
enum class SapeMode { query, key, both };

inline SapeMode parse_sape_mode(const std::string& s) {
  if (s == "query" || s == "q" || s == "Q") return SapeMode::query;
  if (s == "key" || s == "k" || s == "K") return SapeMode::key;
  if (s == "both" || s == "qk" || s == "QK") return SapeMode::both;
  throw std::invalid_argument("invalid SaPE2 mode '" + s + "' (expected query, key or both)");
}

inline const char* to_string(SapeMode m) {
  switch (m) {
    case SapeMode::query: return "query";
    case SapeMode::key: return "key";
    case SapeMode::both: return "both";
  }
  return "?";
}

/// Upper bound applied to accumulated positions: max_position - 1 (code) or
/// max_position (text).
enum class ClampMode { code, text };

inline ClampMode parse_clamp_mode(const std::string& s) {
  if (s == "code") return ClampMode::code;
  if (s == "text") return ClampMode::text;
  throw std::invalid_argument("invalid clamp mode '" + s + "' (expected code or text)");
}

inline const char* to_string(ClampMode m) { return m == ClampMode::code ? "code" : "text"; }

inline double clamp_bound(std::size_t max_position, ClampMode mode) {
  return mode == ClampMode::code ? static_cast<double>(max_position) - 1.0 : static_cast<double>(max_position);
}

}  // namespace sape2
