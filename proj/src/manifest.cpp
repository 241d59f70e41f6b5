// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/manifest.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>

#include "json.hpp"
#include "seqjepa/config.hpp"
#include "seqjepa/errors.hpp"

namespace seqjepa {

namespace fs = std::filesystem;

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["artifact_version"] = artifact_version;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["world"] = world;
  j["overrides"] = overrides;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  j["out_dir"] = out_dir;
  j["metrics"] = metrics_path;
  j["checkpoint"] = checkpoint_path;
  j["config"] = config_text;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunManifest m;
    m.artifact_version = j.at("artifact_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.world = j.value("world", std::string());
    m.overrides = j.value("overrides", std::vector<std::string>{});
    m.started_at = j.value("started_at", std::string());
    m.finished_at = j.value("finished_at", std::string());
    m.out_dir = j.value("out_dir", std::string());
    m.metrics_path = j.value("metrics", std::string());
    m.checkpoint_path = j.value("checkpoint", std::string());
    m.config_text = j.at("config").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
}

bool RunManifest::hash_matches() const { return hex64(fnv1a64(config_text)) == config_hash; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string resolve_out_path(const std::string& explicit_path, const std::string& default_name) {
  if (!explicit_path.empty()) return explicit_path;
  const char* root = std::getenv(kOutputRootEnv);
  return (fs::path(root && *root ? root : "runs") / default_name).string();
}

void prepare_out_dir(const std::string& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw ConfigError("--out: '" + dir + "' exists and is not a directory");
    if (!fs::is_empty(dir, ec)) {
      if (!force) throw ConfigError("--out: '" + dir + "' is not empty (use --force to overwrite)");
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("--out: cannot create '" + dir + "': " + ec.message());
}

void check_out_file(const std::string& path, bool force) {
  std::error_code ec;
  if (fs::exists(path, ec) && !force) {
    throw ConfigError("--out: '" + path + "' exists (use --force to overwrite)");
  }
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent, ec);
}

}  // namespace seqjepa
