#pragma once

#include <charconv>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sape2 {

/// Malformed or unknown configuration; carries the 1-based line when known.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& msg, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Flat `key = value` lines; `#` starts a comment, blank lines are skipped.
inline std::vector<KeyValue> parse_key_values(std::string_view text) {
  std::vector<KeyValue> out;
  std::size_t line = 0;
  while (!text.empty()) {
    ++line;
    const auto nl = text.find('\n');
    std::string_view raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    raw = trim(raw);
    if (raw.empty()) continue;
    const auto eq = raw.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected `key = value`, got '" + std::string(raw) + "'", line);
    const auto key = trim(raw.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key", line);
    out.push_back({std::string(key), std::string(trim(raw.substr(eq + 1))), line});
  }
  return out;
}

template <typename T>
T parse_number(const KeyValue& kv) {
  T v{};
  const auto* end = kv.value.data() + kv.value.size();
  const auto [ptr, ec] = std::from_chars(kv.value.data(), end, v);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("invalid number '" + kv.value + "' for key '" + kv.key + "'", kv.line);
  }
  return v;
}

inline bool parse_bool(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1" || kv.value == "yes" || kv.value == "on") return true;
  if (kv.value == "false" || kv.value == "0" || kv.value == "no" || kv.value == "off") return false;
  throw ConfigError("invalid boolean '" + kv.value + "' for key '" + kv.key + "'", kv.line);
}

}  // namespace sape2
