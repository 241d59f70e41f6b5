// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container. Layout (all integers little-endian):
//
//   "SJCK"  u32 format version
//   u64 manifest length, manifest text (key = value lines)
//   u64 config length, config text
//   u64 array count, then per array:
//     u32 name length, UTF-8 name, u32 rank, u64 dims[rank],
//     float32 data (row-major)
//   u64 FNV-1a checksum of every preceding byte

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace seqjepa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointManifest {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  double tau = 0;
  std::uint64_t seed = 0;
  std::int64_t optimizer_steps = 0;

  bool operator==(const CheckpointManifest&) const = default;
};

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  CheckpointManifest manifest;
  std::string config_text;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

/// Writes to a temporary sibling and renames, so readers never observe a
/// partial file.
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Throws FormatError on bad magic, version mismatch, checksum or config
/// hash mismatch, or truncation. Nothing is returned on failure.
Checkpoint read_checkpoint(const std::string& path);

}  // namespace seqjepa
