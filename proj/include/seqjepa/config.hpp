// SPDX-License-Identifier: Apache-2.0
//
// Flat key-value configuration documents:
//
//   # comment
//   version = 1
//   d_z = 256
//
// Keys are unique; values are untyped strings parsed on access.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace seqjepa {

inline constexpr int kConfigVersion = 1;

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::string& path);

  /// Canonical text: sorted keys, one `key = value` per line.
  std::string to_string() const;

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  /// Applies a `key=value` override; throws ConfigError when malformed.
  void apply_override(std::string_view assignment);

  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Fails with a ConfigError naming the first key not in `known`.
  void require_known(const std::vector<std::string>& known) const;

 private:
  std::map<std::string, std::string> values_;
};

/// 64-bit FNV-1a; used for config and parameter fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

std::string join_ints(const std::vector<int>& values);

}  // namespace seqjepa
