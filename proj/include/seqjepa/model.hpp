// SPDX-License-Identifier: Apache-2.0
//
// The sequential joint-embedding predictive network: a view encoder, a
// linear action embedder, a transformer aggregator read out at a learned
// [AGG] token, an action-conditioned predictor and an EMA target encoder.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqjepa/autodiff.hpp"
#include "seqjepa/config.hpp"
#include "seqjepa/layers.hpp"

namespace seqjepa {

enum class EncoderKind { conv, mlp };

/// Normalization of the pooled encoder features before the head. Training
/// passes use batch statistics and update running ones; inference uses the
/// running statistics.
enum class FeatureNorm {
  none,
  center,  // subtract the batch mean
  batch    // batch norm with learned gain and shift
};

struct EncoderSpec {
  EncoderKind kind = EncoderKind::conv;
  int channels = 3;
  int height = 64;
  int width = 64;
  /// Conv: channel count per stride-2 block. MLP: hidden widths.
  std::vector<int> layers{16, 32, 64, 128};
  /// Applied to raw [0,1] pixels before the first layer.
  double pixel_mean = 0.5;
  double pixel_std = 0.25;
  FeatureNorm feature_norm = FeatureNorm::center;
  /// Conv encoder only: conv, batch norm, rectifier in every block (the
  /// conv bias is then dropped). Off by default: with it the learned
  /// features carried less transformation information.
  bool conv_norm = false;

  int input_size() const { return channels * height * width; }
};

struct ModelConfig {
  int d_z = 256;
  int d_a = 128;
  EncoderSpec encoder;
  int aggregator_layers = 3;
  int aggregator_heads = 4;
  int predictor_hidden = 1024;
  double ema_tau_base = 0.996;
  std::int64_t total_steps = 1000;
  int action_dim = 4;
  bool positional_embedding = false;
  int max_tokens = 32;  // only used with positional_embedding
  bool action_bias = false;
  std::uint64_t init_seed = 0;

  int token_width() const { return d_z + d_a; }
  void validate() const;

  void write(KeyValueConfig& kv) const;
  static ModelConfig read(const KeyValueConfig& kv);
  static std::vector<std::string> keys();
};

enum class RepresentationKind { per_view, aggregate, predicted, target };

struct LossOutput {
  double loss = 0;
  double cosine = 0;
  double collapse_std = 0;
};

/// Which action-conditioning paths are active. Zeroed paths receive
/// all-zero embeddings.
struct Conditioning {
  bool transformer = true;
  bool predictor = true;
};

/// How the prediction target is produced.
enum class TargetMode {
  ema_stop_gradient,   // EMA target encoder behind a stop-gradient
  online_no_stop_grad  // target = online encoder, gradients flow (collapses)
};

/// Numeric batch for one training step: `batch` episodes of `seq` context
/// views, one target view each, and `seq` raw actions each.
template <typename T>
struct EpisodeBatch {
  ad::Index batch = 0;
  ad::Index seq = 0;
  ad::Matrix<T> context;  // (batch*seq) x pixels, episode-major
  ad::Matrix<T> target;   // batch x pixels
  ad::Matrix<T> actions;  // (batch*seq) x action_dim
};

/// View encoder: stride-2 conv blocks + global average pool + linear, or a
/// rectified MLP over flattened pixels.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderSpec& spec, int d_z, Rng& rng);

  /// images: batch x (C*H*W) raw pixels in [0,1]. `train` selects batch
  /// statistics for the feature norm and updates the running ones.
  ad::Var<T> forward(const ad::Matrix<T>& images, bool train = false) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;
  /// Running feature-norm statistics (empty without feature_norm).
  void collect_buffers(const std::string& prefix, ParameterList<T>& out) const;
  /// Deep copy whose parameters do not require gradients.
  Encoder frozen_copy() const;
  const EncoderSpec& spec() const { return spec_; }

 private:
  EncoderSpec spec_;
  int d_z_ = 0;
  std::vector<ad::Var<T>> conv_weights_;
  std::vector<ad::Var<T>> conv_biases_;
  std::vector<ad::ConvGeometry> geoms_;
  std::vector<ad::Var<T>> conv_gains_;
  std::vector<ad::Var<T>> conv_shifts_;
  std::vector<ad::Var<T>> conv_running_mean_;
  std::vector<ad::Var<T>> conv_running_var_;
  std::vector<Linear<T>> hidden_;
  ad::Var<T> norm_gain_;
  ad::Var<T> norm_shift_;
  ad::Var<T> running_mean_;
  ad::Var<T> running_var_;
  Linear<T> head_;
};

/// Transformer over [AGG], (z_1|a_1), ..., (z_{M-1}|a_{M-1}), (z_M|0),
/// read out at the [AGG] position through a learned map to width d_z.
template <typename T>
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(const ModelConfig& cfg, Rng& rng);

  /// z: (batch*M) x d_z; a: (batch*(M-1)) x d_a. Returns batch x d_z.
  ad::Var<T> forward(const ad::Var<T>& z, const ad::Var<T>& a, ad::Index batch, ad::Index m) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;

  const ad::Var<T>& agg_token() const { return agg_token_; }

 private:
  int d_z_ = 0;
  int d_a_ = 0;
  ad::Var<T> agg_token_;
  ad::Var<T> positions_;
  std::vector<TransformerLayer<T>> layers_;
  Linear<T> readout_;
};

template <typename T>
struct StepResult {
  LossOutput loss;
  ad::Matrix<T> predicted;  // batch x d_z
  ad::Matrix<T> target;     // batch x d_z
};

template <typename T>
class ModelState {
 public:
  explicit ModelState(const ModelConfig& cfg);
  ModelState(const ModelState& other);
  ModelState& operator=(const ModelState& other);
  ModelState(ModelState&&) noexcept = default;
  ModelState& operator=(ModelState&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }

  ad::Var<T> encode_views(const ad::Matrix<T>& views, bool train = false) const;
  /// Rows of raw actions -> rows of width d_a.
  ad::Var<T> embed_action(const ad::Matrix<T>& raw) const;
  ad::Var<T> aggregate(const ad::Var<T>& z, const ad::Var<T>& a, ad::Index batch, ad::Index m) const {
    return aggregator_.forward(z, a, batch, m);
  }
  /// MLP over [z_agg | a_M].
  ad::Var<T> predict_next(const ad::Var<T>& z_agg, const ad::Var<T>& a_last) const;
  /// Forward pass through the target encoder; the result carries no graph.
  ad::Matrix<T> target_encode(const ad::Matrix<T>& views, bool train = false) const;

  /// Composes the full pipeline, accumulates gradients into the online
  /// parameters (after clearing them) and returns the loss statistics.
  StepResult<T> forward_train_step(const EpisodeBatch<T>& batch, Conditioning cond = {},
                                   TargetMode mode = TargetMode::ema_stop_gradient);

  /// Inference: aggregate representation of the first `m` context views.
  /// `zero_views` replaces every encoded view by zeros (vision ablation).
  ad::Matrix<T> aggregate_representation(const ad::Matrix<T>& context, const ad::Matrix<T>& actions,
                                         ad::Index batch, ad::Index m, Conditioning cond = {},
                                         bool zero_views = false) const;

  /// Inference: predicted embedding of view m from views [0, m) and all m
  /// actions (the last one maps view m-1 to view m).
  ad::Matrix<T> predict_from_context(const ad::Matrix<T>& context, const ad::Matrix<T>& actions, ad::Index batch,
                                     ad::Index m, Conditioning cond = {}) const;

  /// EMA step at the current step counter. Does not advance the counter.
  void ema_update();
  double current_tau() const;

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  /// Parameters updated by the optimizer, in a fixed order.
  const ParameterList<T>& online_parameters() const { return online_; }
  const ParameterList<T>& target_parameters() const { return target_; }
  /// Online encoder subset, aligned with target_parameters().
  const ParameterList<T>& online_encoder_parameters() const { return online_encoder_; }
  /// Non-trainable running statistics of both encoders.
  const ParameterList<T>& buffers() const { return buffers_; }

  const Encoder<T>& encoder() const { return encoder_; }
  const Encoder<T>& target_encoder() const { return target_encoder_; }

 private:
  void rebuild_lists();

  ModelConfig cfg_;
  Encoder<T> encoder_;
  Encoder<T> target_encoder_;
  Linear<T> action_embed_;
  Aggregator<T> aggregator_;
  Mlp<T> predictor_;
  std::int64_t step_ = 0;

  ParameterList<T> online_;
  ParameterList<T> online_encoder_;
  ParameterList<T> target_;
  ParameterList<T> buffers_;
};

/// tau(k) = 1 - (1 - base) (cos(pi k / K) + 1) / 2.
double ema_tau(double base, std::int64_t step, std::int64_t total_steps);

/// Cosine loss between rows; throws NumericDegeneracyError on norm < 1e-12.
template <typename T>
LossOutput seqjepa_loss(const ad::Matrix<T>& predicted, const ad::Matrix<T>& target);

/// Mean over dimensions of the per-dimension standard deviation (across
/// rows) of row-normalized vectors.
template <typename T>
double collapse_std(const ad::Matrix<T>& rows);

/// Fingerprint of parameter values (bitwise).
template <typename T>
std::uint64_t parameter_hash(const ParameterList<T>& params);

}  // namespace seqjepa
