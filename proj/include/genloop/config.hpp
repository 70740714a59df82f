#pragma once

// Flat key=value configuration files: '#' comments, one binding per line.
// Typed getters fall back to defaults; canonical_dump() gives a stable byte
// representation for hashing into run manifests.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "genloop/common.hpp"

namespace genloop::config {

class Config {
 public:
  Config() = default;
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_str(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;

  // keys sorted, "key=value" lines
  std::string canonical_dump() const;
  uint32_t hash() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace genloop::config
