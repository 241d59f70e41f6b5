// SPDX-License-Identifier: Apache-2.0
//
// Run manifests and output-directory policy shared by the command line
// subcommands.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace seqjepa {

inline constexpr const char* kArtifactVersion = "0.1.0";

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "SEQJEPA_OUT";

/// Written into a run directory before the first training step.
struct RunManifest {
  std::string artifact_version = kArtifactVersion;
  std::string config_text;  // canonical config snapshot
  std::string config_hash;  // hex FNV-1a of config_text
  std::uint64_t seed = 0;
  std::string world;
  std::vector<std::string> overrides;  // --set assignments, in order
  std::string started_at;              // UTC, ISO 8601
  std::string finished_at;             // empty while running
  std::string out_dir;
  std::string metrics_path;
  std::string checkpoint_path;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  /// True when config_hash is the hash of config_text.
  bool hash_matches() const;
};

std::string utc_timestamp();

/// `explicit_dir` when given, else <root>/<name> with root from
/// SEQJEPA_OUT (default "runs").
std::string resolve_out_path(const std::string& explicit_path, const std::string& default_name);

/// Refuses an existing non-empty directory unless `force`, in which case
/// its contents are removed. Creates the directory. ConfigError on refusal.
void prepare_out_dir(const std::string& dir, bool force);

/// Refuses an existing file unless `force`. ConfigError on refusal.
void check_out_file(const std::string& path, bool force);

}  // namespace seqjepa
