#pragma once

// Checkpoint file:
//
//   sape2-checkpoint
//   version = 1
//   <VitConfig as key = value lines>
//   epoch = <completed epochs>
//   payload_floats = <count>
//   end
//   <payload_floats little-endian float32 values, declaration order>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sape2/config.hpp"
#include "sape2/vit.hpp"

namespace sape2 {

inline constexpr const char* kCheckpointMagic = "sape2-checkpoint";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointHeader {
  int version = kCheckpointVersion;
  VitConfig config;
  std::size_t epoch = 0;
  std::size_t payload_floats = 0;
};

namespace detail {

inline std::uint32_t float_bits_le(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof u);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  return u;
}

inline float float_from_le(std::uint32_t u) {
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  float f;
  std::memcpy(&f, &u, sizeof f);
  return f;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const VisionTransformer<T>& model, std::size_t epoch = 0) {
  std::vector<float> payload;
  for (const auto& p : model.parameters())
    for (std::size_t i = 0; i < p.numel(); ++i) payload.push_back(static_cast<float>(p[i]));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out << kCheckpointMagic << "\n" << "version = " << kCheckpointVersion << "\n";
  for (const auto& [k, v] : model.config().to_key_values()) out << k << " = " << v << "\n";
  out << "epoch = " << epoch << "\n" << "payload_floats = " << payload.size() << "\nend\n";
  std::vector<char> bytes(payload.size() * 4);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    const auto u = detail::float_bits_le(payload[i]);
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

/// Reads the text header and leaves `in` positioned at the payload.
inline CheckpointHeader read_checkpoint_header(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  }
  std::string text;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    text += line + "\n";
  }
  if (!ended) throw CheckpointError("'" + path + "': truncated header");
  CheckpointHeader h;
  bool have_version = false, have_count = false;
  for (const auto& kv : parse_key_values(text)) {
    if (kv.key == "version") {
      h.version = parse_number<int>(kv);
      have_version = true;
      if (h.version != kCheckpointVersion) {
        throw CheckpointError("'" + path + "': checkpoint version " + std::to_string(h.version) +
                              " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
      }
    } else if (kv.key == "epoch") {
      h.epoch = parse_number<std::size_t>(kv);
    } else if (kv.key == "payload_floats") {
      h.payload_floats = parse_number<std::size_t>(kv);
      have_count = true;
    } else if (!h.config.apply(kv)) {
      throw CheckpointError("'" + path + "': unknown header key '" + kv.key + "'");
    }
  }
  if (!have_version || !have_count) throw CheckpointError("'" + path + "': header missing version or payload_floats");
  h.config.validate();
  return h;
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  return read_checkpoint_header(in, path);
}

template <typename T>
struct LoadedCheckpoint {
  CheckpointHeader header;
  VisionTransformer<T> model;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  auto header = read_checkpoint_header(in, path);
  VisionTransformer<T> model(header.config);
  if (model.parameter_count() != header.payload_floats) {
    throw CheckpointError("'" + path + "': payload has " + std::to_string(header.payload_floats) +
                          " values but the config implies " + std::to_string(model.parameter_count()));
  }
  std::vector<char> bytes(header.payload_floats * 4);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw CheckpointError("'" + path + "': truncated payload");
  std::size_t off = 0;
  for (auto& p : model.parameters()) {
    for (std::size_t i = 0; i < p.numel(); ++i, ++off) {
      std::uint32_t u;
      std::memcpy(&u, bytes.data() + 4 * off, 4);
      p[i] = static_cast<T>(detail::float_from_le(u));
    }
  }
  return {header, std::move(model)};
}

}  // namespace sape2
