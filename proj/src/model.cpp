// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/model.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

#include "seqjepa/errors.hpp"

namespace seqjepa {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (d_z <= 0) fail("d_z", "must be positive");
  if (d_a <= 0) fail("d_a", "must be positive");
  if (aggregator_layers < 0) fail("aggregator_layers", "must be non-negative");
  if (aggregator_heads <= 0) fail("aggregator_heads", "must be positive");
  if (token_width() % aggregator_heads != 0) fail("aggregator_heads", "must divide d_z + d_a");
  if (predictor_hidden <= 0) fail("predictor_hidden", "must be positive");
  if (!(ema_tau_base > 0.0 && ema_tau_base < 1.0)) fail("ema_tau_base", "must lie in (0, 1)");
  if (total_steps <= 0) fail("total_steps", "must be positive");
  if (action_dim <= 0) fail("action_dim", "must be positive");
  if (positional_embedding && max_tokens < 2) fail("max_tokens", "must be at least 2");
  if (encoder.channels <= 0 || encoder.height <= 0 || encoder.width <= 0) fail("image", "shape must be positive");
  if (encoder.layers.empty()) fail("encoder_layers", "must list at least one layer");
  for (int w : encoder.layers) {
    if (w <= 0) fail("encoder_layers", "widths must be positive");
  }
  if (!(encoder.pixel_std > 0)) fail("pixel_std", "must be positive");
}

std::vector<std::string> ModelConfig::keys() {
  return {"d_z", "d_a", "encoder", "encoder_layers", "image_channels", "image_height", "image_width",
          "pixel_mean", "pixel_std", "encoder_norm", "encoder_conv_norm", "aggregator_layers", "aggregator_heads", "predictor_hidden",
          "ema_tau_base", "total_steps", "action_dim", "positional_embedding", "max_tokens",
          "action_bias", "init_seed"};
}

void ModelConfig::write(KeyValueConfig& kv) const {
  kv.set("d_z", std::to_string(d_z));
  kv.set("d_a", std::to_string(d_a));
  kv.set("encoder", encoder.kind == EncoderKind::conv ? "conv" : "mlp");
  kv.set("encoder_layers", join_ints(encoder.layers));
  kv.set("image_channels", std::to_string(encoder.channels));
  kv.set("image_height", std::to_string(encoder.height));
  kv.set("image_width", std::to_string(encoder.width));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", encoder.pixel_mean);
  kv.set("pixel_mean", buf);
  std::snprintf(buf, sizeof buf, "%.17g", encoder.pixel_std);
  kv.set("pixel_std", buf);
  kv.set("encoder_norm", encoder.feature_norm == FeatureNorm::batch    ? "batch"
                         : encoder.feature_norm == FeatureNorm::center ? "center"
                                                                       : "none");
  kv.set("encoder_conv_norm", encoder.conv_norm ? "true" : "false");
  kv.set("aggregator_layers", std::to_string(aggregator_layers));
  kv.set("aggregator_heads", std::to_string(aggregator_heads));
  kv.set("predictor_hidden", std::to_string(predictor_hidden));
  std::snprintf(buf, sizeof buf, "%.17g", ema_tau_base);
  kv.set("ema_tau_base", buf);
  kv.set("total_steps", std::to_string(total_steps));
  kv.set("action_dim", std::to_string(action_dim));
  kv.set("positional_embedding", positional_embedding ? "true" : "false");
  kv.set("max_tokens", std::to_string(max_tokens));
  kv.set("action_bias", action_bias ? "true" : "false");
  kv.set("init_seed", std::to_string(init_seed));
}

ModelConfig ModelConfig::read(const KeyValueConfig& kv) {
  ModelConfig c;
  c.d_z = static_cast<int>(kv.get_int("d_z", c.d_z));
  c.d_a = static_cast<int>(kv.get_int("d_a", c.d_a));
  const auto enc = kv.get_string("encoder", "conv");
  if (enc == "conv") {
    c.encoder.kind = EncoderKind::conv;
  } else if (enc == "mlp") {
    c.encoder.kind = EncoderKind::mlp;
  } else {
    throw ConfigError("encoder: expected conv or mlp, got '" + enc + "'");
  }
  c.encoder.layers = kv.get_int_list("encoder_layers", c.encoder.layers);
  c.encoder.channels = static_cast<int>(kv.get_int("image_channels", c.encoder.channels));
  c.encoder.height = static_cast<int>(kv.get_int("image_height", c.encoder.height));
  c.encoder.width = static_cast<int>(kv.get_int("image_width", c.encoder.width));
  c.encoder.pixel_mean = kv.get_double("pixel_mean", c.encoder.pixel_mean);
  c.encoder.pixel_std = kv.get_double("pixel_std", c.encoder.pixel_std);
  const auto norm = kv.get_string("encoder_norm", "center");
  if (norm == "batch") {
    c.encoder.feature_norm = FeatureNorm::batch;
  } else if (norm == "center") {
    c.encoder.feature_norm = FeatureNorm::center;
  } else if (norm == "none") {
    c.encoder.feature_norm = FeatureNorm::none;
  } else {
    throw ConfigError("encoder_norm: expected batch, center or none, got '" + norm + "'");
  }
  c.encoder.conv_norm = kv.get_bool("encoder_conv_norm", c.encoder.conv_norm);
  c.aggregator_layers = static_cast<int>(kv.get_int("aggregator_layers", c.aggregator_layers));
  c.aggregator_heads = static_cast<int>(kv.get_int("aggregator_heads", c.aggregator_heads));
  c.predictor_hidden = static_cast<int>(kv.get_int("predictor_hidden", c.predictor_hidden));
  c.ema_tau_base = kv.get_double("ema_tau_base", c.ema_tau_base);
  c.total_steps = kv.get_int("total_steps", c.total_steps);
  c.action_dim = static_cast<int>(kv.get_int("action_dim", c.action_dim));
  c.positional_embedding = kv.get_bool("positional_embedding", c.positional_embedding);
  c.max_tokens = static_cast<int>(kv.get_int("max_tokens", c.max_tokens));
  c.action_bias = kv.get_bool("action_bias", c.action_bias);
  c.init_seed = static_cast<std::uint64_t>(kv.get_int("init_seed", static_cast<std::int64_t>(c.init_seed)));
  return c;
}

double ema_tau(double base, std::int64_t step, std::int64_t total_steps) {
  if (step >= total_steps) return 1.0;
  const double k = static_cast<double>(step);
  const double K = static_cast<double>(total_steps);
  return 1.0 - (1.0 - base) * (std::cos(std::numbers::pi * k / K) + 1.0) / 2.0;
}

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
Encoder<T>::Encoder(const EncoderSpec& spec, int d_z, Rng& rng) : spec_(spec), d_z_(d_z) {
  if (spec.kind == EncoderKind::conv) {
    ad::Index c = spec.channels, h = spec.height, w = spec.width;
    for (int out_c : spec.layers) {
      ad::ConvGeometry g{c, h, w, out_c, 3, 2, 1};
      if (g.out_height() < 1 || g.out_width() < 1) throw ConfigError("encoder_layers: too many stride-2 blocks for image size");
      geoms_.push_back(g);
      conv_weights_.push_back(ad::Var<T>::parameter(fan_in_uniform<T>(out_c, g.patch_size(), g.patch_size(), rng)));
      if (spec.conv_norm) {
        conv_biases_.emplace_back();
        conv_gains_.push_back(ad::Var<T>::parameter(ad::Matrix<T>::Ones(1, out_c)));
        conv_shifts_.push_back(ad::Var<T>::parameter(ad::Matrix<T>::Zero(1, out_c)));
        conv_running_mean_.push_back(ad::Var<T>::constant(ad::Matrix<T>::Zero(1, out_c)));
        conv_running_var_.push_back(ad::Var<T>::constant(ad::Matrix<T>::Ones(1, out_c)));
      } else {
        conv_biases_.push_back(ad::Var<T>::parameter(ad::Matrix<T>::Zero(1, out_c)));
      }
      c = out_c;
      h = g.out_height();
      w = g.out_width();
    }
  } else {
    ad::Index in = spec.input_size();
    for (int width : spec.layers) {
      hidden_.emplace_back(in, width, true, rng);
      in = width;
    }
  }
  const ad::Index features = spec.layers.back();
  if (spec.feature_norm != FeatureNorm::none) {
    running_mean_ = ad::Var<T>::constant(ad::Matrix<T>::Zero(1, features));
  }
  if (spec.feature_norm == FeatureNorm::batch) {
    norm_gain_ = ad::Var<T>::parameter(ad::Matrix<T>::Ones(1, features));
    norm_shift_ = ad::Var<T>::parameter(ad::Matrix<T>::Zero(1, features));
    running_var_ = ad::Var<T>::constant(ad::Matrix<T>::Ones(1, features));
  }
  head_ = Linear<T>(features, d_z, true, rng);
}

template <typename T>
ad::Var<T> Encoder<T>::forward(const ad::Matrix<T>& images, bool train) const {
  if (images.cols() != spec_.input_size()) {
    throw ShapeError("encoder: view has " + std::to_string(images.cols()) + " values, encoder expects " +
                     std::to_string(spec_.input_size()));
  }
  const T mean = static_cast<T>(spec_.pixel_mean);
  const T inv_std = static_cast<T>(1.0 / spec_.pixel_std);
  auto x = ad::Var<T>::constant((images.array() - mean) * inv_std);
  constexpr T kEps = T(1e-5);
  constexpr T kMomentum = T(0.1);
  const bool batch_stats = train && x.rows() > 1;
  if (spec_.kind == EncoderKind::conv) {
    for (std::size_t i = 0; i < geoms_.size(); ++i) {
      x = ad::conv2d(x, conv_weights_[i], conv_biases_[i], geoms_[i]);
      if (spec_.conv_norm) {
        const ad::Index ch = geoms_[i].out_channels;
        if (batch_stats) {
          ad::Matrix<T> m, v;
          x = ad::channel_batch_norm(x, conv_gains_[i], conv_shifts_[i], ch, kEps, &m, &v);
          const T n = static_cast<T>(x.rows() * (x.cols() / ch));
          auto rm = conv_running_mean_[i];
          auto rv = conv_running_var_[i];
          rm.mutable_value() = (T(1) - kMomentum) * rm.value() + kMomentum * m;
          rv.mutable_value() = (T(1) - kMomentum) * rv.value() + kMomentum * (n / (n - 1)) * v;
        } else {
          const auto inv = ad::Var<T>::constant((conv_running_var_[i].value().array() + kEps).rsqrt().matrix());
          const auto scale = ad::mul(conv_gains_[i], inv);
          const auto shift =
              ad::sub(conv_shifts_[i], ad::mul(ad::Var<T>::constant(conv_running_mean_[i].value()), scale));
          x = ad::channel_affine(x, scale, shift, ch);
        }
      }
      x = ad::relu(x);
    }
    x = ad::global_avg_pool(x, geoms_.back().out_channels);
  } else {
    for (const auto& layer : hidden_) x = ad::relu(layer.forward(x));
  }
  if (spec_.feature_norm == FeatureNorm::center) {
    if (batch_stats) {
      ad::Matrix<T> mean;
      x = ad::center_columns(x, &mean);
      auto rm = running_mean_;
      rm.mutable_value() = (T(1) - kMomentum) * rm.value() + kMomentum * mean;
    } else {
      x = ad::column_affine(x, ad::Var<T>::constant(ad::Matrix<T>::Ones(1, x.cols())),
                            ad::Var<T>::constant(-running_mean_.value()));
    }
  } else if (spec_.feature_norm == FeatureNorm::batch) {
    if (batch_stats) {
      ad::Matrix<T> mean, var;
      x = ad::batch_norm(x, norm_gain_, norm_shift_, kEps, &mean, &var);
      const T unbias = static_cast<T>(x.rows()) / static_cast<T>(x.rows() - 1);
      auto rm = running_mean_;
      auto rv = running_var_;
      rm.mutable_value() = (T(1) - kMomentum) * rm.value() + kMomentum * mean;
      rv.mutable_value() = (T(1) - kMomentum) * rv.value() + kMomentum * unbias * var;
    } else {
      // Inference: fixed per-column affine map from the running statistics.
      const auto inv = ad::Var<T>::constant((running_var_.value().array() + kEps).rsqrt().matrix());
      const auto scale = ad::mul(norm_gain_, inv);
      const auto shift = ad::sub(norm_shift_, ad::mul(ad::Var<T>::constant(running_mean_.value()), scale));
      x = ad::column_affine(x, scale, shift);
    }
  }
  return head_.forward(x);
}

template <typename T>
void Encoder<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  for (std::size_t i = 0; i < conv_weights_.size(); ++i) {
    const std::string name = prefix + ".conv" + std::to_string(i);
    out.push_back({name + ".weight", conv_weights_[i], true});
    if (conv_biases_[i].defined()) out.push_back({name + ".bias", conv_biases_[i], false});
    if (i < conv_gains_.size()) {
      out.push_back({name + ".norm.gain", conv_gains_[i], false});
      out.push_back({name + ".norm.shift", conv_shifts_[i], false});
    }
  }
  for (std::size_t i = 0; i < hidden_.size(); ++i) hidden_[i].collect(prefix + ".fc" + std::to_string(i), out);
  if (spec_.feature_norm == FeatureNorm::batch) {
    out.push_back({prefix + ".norm.gain", norm_gain_, false});
    out.push_back({prefix + ".norm.shift", norm_shift_, false});
  }
  head_.collect(prefix + ".head", out);
}

template <typename T>
void Encoder<T>::collect_buffers(const std::string& prefix, ParameterList<T>& out) const {
  for (std::size_t i = 0; i < conv_running_mean_.size(); ++i) {
    const std::string name = prefix + ".conv" + std::to_string(i) + ".norm";
    out.push_back({name + ".running_mean", conv_running_mean_[i], false});
    out.push_back({name + ".running_var", conv_running_var_[i], false});
  }
  if (running_mean_.defined()) out.push_back({prefix + ".norm.running_mean", running_mean_, false});
  if (running_var_.defined()) out.push_back({prefix + ".norm.running_var", running_var_, false});
}

template <typename T>
Encoder<T> Encoder<T>::frozen_copy() const {
  Encoder copy = *this;  // shares nodes; replaced below
  auto fresh = [](const ad::Var<T>& v) { return ad::Var<T>::constant(v.value()); };
  for (auto& w : copy.conv_weights_) w = fresh(w);
  for (auto& b : copy.conv_biases_) {
    if (b.defined()) b = fresh(b);
  }
  for (auto* list : {&copy.conv_gains_, &copy.conv_shifts_, &copy.conv_running_mean_, &copy.conv_running_var_}) {
    for (auto& v : *list) v = fresh(v);
  }
  for (auto& layer : copy.hidden_) {
    layer.weight() = fresh(layer.weight());
    if (layer.has_bias()) layer.bias() = fresh(layer.bias());
  }
  for (auto* v : {&copy.norm_gain_, &copy.norm_shift_, &copy.running_mean_, &copy.running_var_}) {
    if (v->defined()) *v = fresh(*v);
  }
  copy.head_.weight() = fresh(copy.head_.weight());
  if (copy.head_.has_bias()) copy.head_.bias() = fresh(copy.head_.bias());
  return copy;
}

// ---------------------------------------------------------------------------
// Aggregator

namespace {

/// Builds the (batch*(m+1)) x (d_z+d_a) token matrix.
template <typename T>
ad::Var<T> assemble_tokens(const ad::Var<T>& agg, const ad::Var<T>& z, const ad::Var<T>& a, ad::Index batch,
                           ad::Index m, ad::Index d_z, ad::Index d_a) {
  const ad::Index seq = m + 1;
  ad::Matrix<T> tokens = ad::Matrix<T>::Zero(batch * seq, d_z + d_a);
  for (ad::Index b = 0; b < batch; ++b) {
    tokens.row(b * seq) = agg.value().row(0);
    for (ad::Index i = 0; i < m; ++i) {
      tokens.row(b * seq + 1 + i).head(d_z) = z.value().row(b * m + i);
      if (i + 1 < m) tokens.row(b * seq + 1 + i).tail(d_a) = a.value().row(b * (m - 1) + i);
    }
  }
  return ad::detail::make_result<T>(std::move(tokens), {agg, z, a},
                                    [agg, z, a, batch, m, d_z, d_a](ad::Node<T>& self) {
                                      const ad::Index seq = m + 1;
                                      for (ad::Index b = 0; b < batch; ++b) {
                                        if (agg.requires_grad()) agg.node()->grad_buffer().row(0) += self.grad.row(b * seq);
                                        for (ad::Index i = 0; i < m; ++i) {
                                          const auto row = self.grad.row(b * seq + 1 + i);
                                          if (z.requires_grad()) z.node()->grad_buffer().row(b * m + i) += row.head(d_z);
                                          if (i + 1 < m && a.requires_grad()) {
                                            a.node()->grad_buffer().row(b * (m - 1) + i) += row.tail(d_a);
                                          }
                                        }
                                      }
                                    });
}

/// Adds rows 0..seq-1 of `pos` to every sequence.
template <typename T>
ad::Var<T> add_positions(const ad::Var<T>& x, const ad::Var<T>& pos, ad::Index batch, ad::Index seq) {
  if (seq > pos.rows()) throw SequenceError("sequence longer than max_tokens");
  ad::Matrix<T> out = x.value();
  for (ad::Index b = 0; b < batch; ++b) out.middleRows(b * seq, seq) += pos.value().topRows(seq);
  return ad::detail::make_result<T>(std::move(out), {x, pos}, [x, pos, batch, seq](ad::Node<T>& self) {
    if (x.requires_grad()) x.node()->grad_buffer() += self.grad;
    if (pos.requires_grad()) {
      auto& g = pos.node()->grad_buffer();
      for (ad::Index b = 0; b < batch; ++b) g.topRows(seq) += self.grad.middleRows(b * seq, seq);
    }
  });
}

}  // namespace

template <typename T>
Aggregator<T>::Aggregator(const ModelConfig& cfg, Rng& rng) : d_z_(cfg.d_z), d_a_(cfg.d_a) {
  const ad::Index width = cfg.token_width();
  std::normal_distribution<double> token_init(0.0, 0.02);
  ad::Matrix<T> token(1, width);
  for (ad::Index i = 0; i < width; ++i) token(0, i) = static_cast<T>(token_init(rng));
  agg_token_ = ad::Var<T>::parameter(std::move(token));
  if (cfg.positional_embedding) {
    ad::Matrix<T> pos(cfg.max_tokens, width);
    for (ad::Index i = 0; i < pos.size(); ++i) pos.data()[i] = static_cast<T>(token_init(rng));
    positions_ = ad::Var<T>::parameter(std::move(pos));
  }
  for (int i = 0; i < cfg.aggregator_layers; ++i) layers_.emplace_back(width, cfg.aggregator_heads, rng);
  readout_ = Linear<T>(width, cfg.d_z, true, rng);
}

template <typename T>
ad::Var<T> Aggregator<T>::forward(const ad::Var<T>& z, const ad::Var<T>& a, ad::Index batch, ad::Index m) const {
  if (m < 1) throw SequenceError("aggregate: need at least one view");
  if (z.rows() != batch * m || z.cols() != d_z_) {
    throw SequenceError("aggregate: expected " + std::to_string(batch * m) + " view rows of width " +
                        std::to_string(d_z_));
  }
  if (a.rows() != batch * (m - 1) || (a.rows() > 0 && a.cols() != d_a_)) {
    throw SequenceError("aggregate: expected " + std::to_string(m - 1) + " actions per sequence, got " +
                        std::to_string(batch > 0 ? a.rows() / batch : a.rows()) + " rows");
  }
  const ad::Index seq = m + 1;
  auto x = assemble_tokens(agg_token_, z, a, batch, m, d_z_, d_a_);
  if (positions_.defined()) x = add_positions(x, positions_, batch, seq);
  for (const auto& layer : layers_) x = layer.forward(x, batch, seq);
  std::vector<ad::Index> agg_rows(static_cast<std::size_t>(batch));
  for (ad::Index b = 0; b < batch; ++b) agg_rows[static_cast<std::size_t>(b)] = b * seq;
  return readout_.forward(ad::gather_rows(x, std::move(agg_rows)));
}

template <typename T>
void Aggregator<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".agg_token", agg_token_, false});
  if (positions_.defined()) out.push_back({prefix + ".positions", positions_, false});
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
  readout_.collect(prefix + ".readout", out);
}

// ---------------------------------------------------------------------------
// ModelState

template <typename T>
ModelState<T>::ModelState(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.init_seed);
  encoder_ = Encoder<T>(cfg_.encoder, cfg_.d_z, rng);
  action_embed_ = Linear<T>(cfg_.action_dim, cfg_.d_a, cfg_.action_bias, rng);
  aggregator_ = Aggregator<T>(cfg_, rng);
  predictor_ = Mlp<T>(cfg_.token_width(), cfg_.predictor_hidden, cfg_.d_z, rng);
  target_encoder_ = encoder_.frozen_copy();
  rebuild_lists();
}

template <typename T>
ModelState<T>::ModelState(const ModelState& other) : ModelState(other.cfg_) {
  copy_parameter_values(other.online_, online_);
  copy_parameter_values(other.target_, target_);
  copy_parameter_values(other.buffers_, buffers_);
  step_ = other.step_;
}

template <typename T>
ModelState<T>& ModelState<T>::operator=(const ModelState& other) {
  if (this != &other) *this = ModelState(other);
  return *this;
}

template <typename T>
void ModelState<T>::rebuild_lists() {
  online_.clear();
  online_encoder_.clear();
  target_.clear();
  encoder_.collect("encoder", online_encoder_);
  online_ = online_encoder_;
  action_embed_.collect("action_embed", online_);
  aggregator_.collect("aggregator", online_);
  predictor_.collect("predictor", online_);
  target_encoder_.collect("target_encoder", target_);
  buffers_.clear();
  encoder_.collect_buffers("encoder", buffers_);
  target_encoder_.collect_buffers("target_encoder", buffers_);
}

template <typename T>
ad::Var<T> ModelState<T>::encode_views(const ad::Matrix<T>& views, bool train) const {
  return encoder_.forward(views, train);
}

template <typename T>
ad::Var<T> ModelState<T>::embed_action(const ad::Matrix<T>& raw) const {
  if (raw.cols() != cfg_.action_dim) {
    throw ShapeError("embed_action: action has " + std::to_string(raw.cols()) + " values, expected " +
                     std::to_string(cfg_.action_dim));
  }
  return action_embed_.forward(ad::Var<T>::constant(raw));
}

template <typename T>
ad::Var<T> ModelState<T>::predict_next(const ad::Var<T>& z_agg, const ad::Var<T>& a_last) const {
  if (z_agg.cols() != cfg_.d_z || a_last.cols() != cfg_.d_a || z_agg.rows() != a_last.rows()) {
    throw ShapeError("predict_next: expected widths d_z and d_a with equal row counts");
  }
  return predictor_.forward(ad::concat_cols<T>({z_agg, a_last}));
}

template <typename T>
ad::Matrix<T> ModelState<T>::target_encode(const ad::Matrix<T>& views, bool train) const {
  return target_encoder_.forward(views, train).value();
}

namespace {

std::vector<ad::Index> context_action_rows(ad::Index batch, ad::Index m) {
  std::vector<ad::Index> rows;
  rows.reserve(static_cast<std::size_t>(batch * (m - 1)));
  for (ad::Index b = 0; b < batch; ++b) {
    for (ad::Index i = 0; i + 1 < m; ++i) rows.push_back(b * m + i);
  }
  return rows;
}

std::vector<ad::Index> last_action_rows(ad::Index batch, ad::Index m) {
  std::vector<ad::Index> rows;
  for (ad::Index b = 0; b < batch; ++b) rows.push_back(b * m + m - 1);
  return rows;
}

}  // namespace

template <typename T>
StepResult<T> ModelState<T>::forward_train_step(const EpisodeBatch<T>& batch, Conditioning cond, TargetMode mode) {
  const ad::Index B = batch.batch;
  const ad::Index M = batch.seq;
  if (M < 1 || batch.context.rows() != B * M || batch.actions.rows() != B * M || batch.target.rows() != B) {
    throw SequenceError("forward_train_step: batch does not hold M context views, M actions and one target");
  }
  zero_grads(online_);
  zero_grads(target_);

  auto z = encode_views(batch.context, true);
  ad::Var<T> embedded;
  if (cond.transformer || cond.predictor) embedded = embed_action(batch.actions);
  auto a_ctx = cond.transformer ? ad::gather_rows(embedded, context_action_rows(B, M))
                                : ad::Var<T>::constant(ad::Matrix<T>::Zero(B * (M - 1), cfg_.d_a));
  auto a_last = cond.predictor ? ad::gather_rows(embedded, last_action_rows(B, M))
                               : ad::Var<T>::constant(ad::Matrix<T>::Zero(B, cfg_.d_a));
  auto z_agg = aggregate(z, a_ctx, B, M);
  auto pred = predict_next(z_agg, a_last);

  ad::Var<T> target = mode == TargetMode::ema_stop_gradient ? ad::Var<T>::constant(target_encode(batch.target, true))
                                                            : encode_views(batch.target, true);
  auto loss = ad::mean_cosine_distance(pred, target);
  ad::backward(loss);

  StepResult<T> out;
  out.loss.loss = static_cast<double>(loss.scalar());
  out.loss.cosine = 1.0 - out.loss.loss;
  out.loss.collapse_std = collapse_std<T>(target.value());
  out.predicted = pred.value();
  out.target = target.value();
  return out;
}

template <typename T>
ad::Matrix<T> ModelState<T>::aggregate_representation(const ad::Matrix<T>& context, const ad::Matrix<T>& actions,
                                                      ad::Index batch, ad::Index m, Conditioning cond,
                                                      bool zero_views) const {
  if (context.rows() != batch * m || actions.rows() != batch * m) {
    throw SequenceError("aggregate_representation: expected m views and m actions per sequence");
  }
  auto z = zero_views ? ad::Var<T>::constant(ad::Matrix<T>::Zero(batch * m, cfg_.d_z)) : encode_views(context);
  auto a_ctx = cond.transformer ? ad::gather_rows(embed_action(actions), context_action_rows(batch, m))
                                : ad::Var<T>::constant(ad::Matrix<T>::Zero(batch * (m - 1), cfg_.d_a));
  return aggregate(z, a_ctx, batch, m).value();
}

template <typename T>
ad::Matrix<T> ModelState<T>::predict_from_context(const ad::Matrix<T>& context, const ad::Matrix<T>& actions,
                                                  ad::Index batch, ad::Index m, Conditioning cond) const {
  if (m < 1 || context.rows() != batch * m || actions.rows() != batch * m) {
    throw SequenceError("predict_from_context: expected m views and m actions per sequence");
  }
  auto z = encode_views(context);
  auto embedded = embed_action(actions);
  auto a_ctx = cond.transformer ? ad::gather_rows(embedded, context_action_rows(batch, m))
                                : ad::Var<T>::constant(ad::Matrix<T>::Zero(batch * (m - 1), cfg_.d_a));
  auto a_last = cond.predictor ? ad::gather_rows(embedded, last_action_rows(batch, m))
                               : ad::Var<T>::constant(ad::Matrix<T>::Zero(batch, cfg_.d_a));
  return predict_next(aggregate(z, a_ctx, batch, m), a_last).value();
}

template <typename T>
double ModelState<T>::current_tau() const {
  return ema_tau(cfg_.ema_tau_base, step_, cfg_.total_steps);
}

template <typename T>
void ModelState<T>::ema_update() {
  const T tau = static_cast<T>(current_tau());
  for (std::size_t i = 0; i < target_.size(); ++i) {
    auto t = target_[i].var;
    t.mutable_value() = tau * t.value() + (T(1) - tau) * online_encoder_[i].var.value();
  }
}

// ---------------------------------------------------------------------------
// Free functions

template <typename T>
LossOutput seqjepa_loss(const ad::Matrix<T>& predicted, const ad::Matrix<T>& target) {
  auto loss = ad::mean_cosine_distance(ad::Var<T>::constant(predicted), ad::Var<T>::constant(target));
  LossOutput out;
  out.loss = static_cast<double>(loss.scalar());
  out.cosine = 1.0 - out.loss;
  out.collapse_std = collapse_std<T>(target);
  return out;
}

template <typename T>
double collapse_std(const ad::Matrix<T>& rows) {
  if (rows.rows() == 0 || rows.cols() == 0) return 0.0;
  Eigen::MatrixXd unit = rows.template cast<double>();
  for (ad::Index r = 0; r < unit.rows(); ++r) {
    const double n = unit.row(r).norm();
    if (n > 0) unit.row(r) /= n;
  }
  const Eigen::RowVectorXd mean = unit.colwise().mean();
  const Eigen::RowVectorXd var = (unit.rowwise() - mean).array().square().colwise().mean();
  return var.array().sqrt().mean();
}

template <typename T>
std::uint64_t parameter_hash(const ParameterList<T>& params) {
  std::uint64_t h = fnv1a64("");
  for (const auto& p : params) {
    h = fnv1a64(p.name, h);
    const auto& v = p.var.value();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(v.data()), sizeof(T) * static_cast<std::size_t>(v.size())), h);
  }
  return h;
}

#define SEQJEPA_INSTANTIATE(T)                                                            \
  template class Encoder<T>;                                                              \
  template class Aggregator<T>;                                                           \
  template class ModelState<T>;                                                           \
  template LossOutput seqjepa_loss<T>(const ad::Matrix<T>&, const ad::Matrix<T>&);        \
  template double collapse_std<T>(const ad::Matrix<T>&);                                  \
  template std::uint64_t parameter_hash<T>(const ParameterList<T>&);

SEQJEPA_INSTANTIATE(float)
SEQJEPA_INSTANTIATE(double)

#undef SEQJEPA_INSTANTIATE

}  // namespace seqjepa
