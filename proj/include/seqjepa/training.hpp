// SPDX-License-Identifier: Apache-2.0
//
// Optimization loop: warmup + cosine learning rate, AdamW with global-norm
// clipping, EMA target updates, batching from a world, checkpoints and
// JSONL metrics.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "seqjepa/checkpoint.hpp"
#include "seqjepa/config.hpp"
#include "seqjepa/model.hpp"
#include "seqjepa/worlds.hpp"

namespace seqjepa {

struct TrainConfig {
  int batch_size = 128;
  std::int64_t total_steps = 2000;
  int M_tr = 3;
  double peak_lr = 4e-4;
  std::int64_t warmup_steps = 200;
  double floor_lr = 1e-5;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 5.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
  Conditioning conditioning;
  TargetMode target_mode = TargetMode::ema_stop_gradient;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  int max_retries = 8;

  void validate() const;
  void write(KeyValueConfig& kv) const;
  static TrainConfig read(const KeyValueConfig& kv);
  static std::vector<std::string> keys();
};

/// Linear from floor to peak over the warmup, then cosine back to floor.
double lr_at(std::int64_t step, const TrainConfig& cfg);

/// Model, training and world settings of one run. The model's image shape,
/// action width and schedule length follow from the world and training
/// settings.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  WorldConfig world;

  /// Fills derived model fields and validates all three parts.
  void finalize();
  KeyValueConfig to_kv() const;
  /// Canonical text; its FNV-1a hash is the config hash.
  std::string text() const { return to_kv().to_string(); }
  std::uint64_t hash() const;
  /// Unknown keys and inconsistent derived fields raise ConfigError.
  static RunConfig from_kv(const KeyValueConfig& kv);
  static std::vector<std::string> keys();
};

/// Named starting points for a run config:
///   desk  - the documented defaults (64x64 sprites, d_z 256, batch 128)
///   fast  - CPU-minute settings used by the acceptance runs (32x32
///           sprites, d_z 64, d_a 32, encoder 8,16,32,64)
///   paper - the paper's optimization values (batch 512, d_z 512); far
///           beyond desk budgets
/// ConfigError for any other name.
KeyValueConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

/// Decoupled weight decay Adam over a fixed parameter list.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
  };

  AdamW() = default;
  AdamW(const ParameterList<float>& params, Options opts);

  void step(const ParameterList<float>& params, double lr);
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::vector<ad::Matrix<float>>& first_moments() { return m_; }
  std::vector<ad::Matrix<float>>& second_moments() { return v_; }
  const std::vector<ad::Matrix<float>>& first_moments() const { return m_; }
  const std::vector<ad::Matrix<float>>& second_moments() const { return v_; }

 private:
  Options opts_;
  std::int64_t t_ = 0;
  std::vector<ad::Matrix<float>> m_;
  std::vector<ad::Matrix<float>> v_;
};

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
double clip_grad_norm(const ParameterList<float>& params, double max_norm);

struct TrainRecord {
  std::int64_t step = 0;
  double loss = 0;
  double cosine = 0;
  double collapse_std = 0;
  double lr = 0;
  double tau = 0;
  double wall_ms = 0;
};

/// One JSON object; wall time is omitted unless requested so that metric
/// files are reproducible byte for byte.
std::string to_json(const TrainRecord& r, bool include_wall_time = false);

/// Episode for stream `stream`, resampled with fresh sources when the
/// saliency support runs out (at most `max_retries` attempts).
Episode sample_with_retry(const World& world, std::uint64_t seed, std::uint64_t stream, int M, int max_retries,
                          bool keep_scene = false);

/// Stacks episodes: views [0, m) as context, view m as target and actions
/// [0, m) as raw actions.
EpisodeBatch<float> to_batch(const std::vector<Episode>& episodes, int m);

/// Batch for training step `step`: streams step*B .. step*B + B - 1.
EpisodeBatch<float> make_batch(const World& world, std::uint64_t seed, std::int64_t step, int batch_size, int M,
                               int max_retries);

/// Flattens views (channel-major pixels) into rows.
ad::Matrix<float> views_to_rows(const std::vector<const Image*>& views);

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  /// Restores model, target, optimizer moments and step.
  static Trainer from_checkpoint(const std::string& path);

  const RunConfig& config() const { return cfg_; }
  const World& world() const { return world_; }
  ModelState<float>& state() { return state_; }
  const ModelState<float>& state() const { return state_; }
  const AdamW& optimizer() const { return opt_; }

  /// One optimizer step at the current step counter. A degenerate loss
  /// raises NumericDegeneracyError naming the step; state is unchanged.
  TrainRecord step();
  /// Steps until the counter reaches `until` (capped at total_steps).
  std::vector<TrainRecord> run(std::int64_t until, const std::function<void(const TrainRecord&)>& on_record = {});
  bool done() const { return state_.step() >= cfg_.train.total_steps; }

  Checkpoint to_checkpoint() const;
  void save(const std::string& path) const { write_checkpoint(to_checkpoint(), path); }

 private:
  RunConfig cfg_;
  World world_;
  ModelState<float> state_;
  AdamW opt_;
};

/// Restores a model for evaluation (no optimizer state needed).
struct LoadedModel {
  RunConfig config;
  ModelState<float> state;
};
LoadedModel load_model(const std::string& checkpoint_path);

/// Full training run: the stream of records and the final state.
struct TrainResult {
  ModelState<float> state;
  std::vector<TrainRecord> records;
};
TrainResult train(const RunConfig& cfg, const std::function<void(const TrainRecord&)>& on_record = {});

struct TrainSummary {
  std::int64_t steps = 0;
  double final_loss = 0;
  double final_smoothed_loss = 0;  // mean of the last 20 records
  std::string config_hash;
  std::string checkpoint;
};

/// Runs `trainer` to completion writing metrics.jsonl, timing.jsonl,
/// checkpoints (ckpt_<step>.bin every checkpoint_every steps and
/// final.bin) and summary.json into `dir`. Metrics are appended when the
/// trainer resumes mid-run.
TrainSummary train_to_directory(Trainer& trainer, const std::string& dir);

/// Mean of a trailing window, for smoothed loss curves.
double trailing_mean(const std::vector<TrainRecord>& records, std::size_t window);

}  // namespace seqjepa
