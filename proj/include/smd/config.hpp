#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace smd {

// Flat `key = value` text configuration. Blank lines and lines starting with
// '#' are ignored. Keys must be unique.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::filesystem::path& path);

  [[nodiscard]] bool has(const std::string& key) const { return values_.contains(key); }
  [[nodiscard]] const std::string& raw(const std::string& key) const;

  [[nodiscard]] double get_double(const std::string& key, double fallback) const;
  [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const;
  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const;
  [[nodiscard]] std::vector<double> get_doubles(const std::string& key) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Throws ValidationError naming the first key accepted by neither `allowed`
  // nor any of `allowed_prefixes`.
  void reject_unknown(const std::set<std::string>& allowed,
                      const std::vector<std::string>& allowed_prefixes = {}) const;

  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return values_; }
  [[nodiscard]] std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
};

// FNV-1a 64-bit over arbitrary bytes; used for config hashes and checksums.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace smd
