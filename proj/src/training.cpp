// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "seqjepa/errors.hpp"

namespace seqjepa {
namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg); };
  if (batch_size <= 0) fail("batch_size", "must be positive");
  if (total_steps <= 0) fail("total_steps", "must be positive");
  if (M_tr < 1) fail("M_tr", "must be at least 1");
  if (!(peak_lr > 0)) fail("peak_lr", "must be positive");
  if (!(floor_lr > 0)) fail("floor_lr", "must be positive");
  if (warmup_steps < 0 || warmup_steps >= total_steps) fail("warmup_steps", "must lie in [0, total_steps)");
  if (weight_decay < 0) fail("weight_decay", "must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1)) fail("adam_beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("adam_beta2", "must lie in [0, 1)");
  if (!(eps > 0)) fail("adam_eps", "must be positive");
  if (grad_clip < 0) fail("grad_clip", "must be non-negative");
  if (checkpoint_every < 0) fail("checkpoint_every", "must be non-negative");
  if (max_retries < 1) fail("max_retries", "must be positive");
}

std::vector<std::string> TrainConfig::keys() {
  return {"batch_size", "total_steps", "M_tr", "peak_lr", "warmup_steps", "floor_lr", "weight_decay",
          "adam_beta1", "adam_beta2", "adam_eps", "grad_clip", "seed", "no_transformer_cond",
          "no_predictor_cond", "target_mode", "checkpoint_every", "max_retries"};
}

void TrainConfig::write(KeyValueConfig& kv) const {
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("total_steps", std::to_string(total_steps));
  kv.set("M_tr", std::to_string(M_tr));
  kv.set("peak_lr", fmt(peak_lr));
  kv.set("warmup_steps", std::to_string(warmup_steps));
  kv.set("floor_lr", fmt(floor_lr));
  kv.set("weight_decay", fmt(weight_decay));
  kv.set("adam_beta1", fmt(beta1));
  kv.set("adam_beta2", fmt(beta2));
  kv.set("adam_eps", fmt(eps));
  kv.set("grad_clip", fmt(grad_clip));
  kv.set("seed", std::to_string(seed));
  kv.set("no_transformer_cond", conditioning.transformer ? "false" : "true");
  kv.set("no_predictor_cond", conditioning.predictor ? "false" : "true");
  kv.set("target_mode", target_mode == TargetMode::ema_stop_gradient ? "ema" : "online_no_stop_grad");
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("max_retries", std::to_string(max_retries));
}

TrainConfig TrainConfig::read(const KeyValueConfig& kv) {
  TrainConfig c;
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.total_steps = kv.get_int("total_steps", c.total_steps);
  c.M_tr = static_cast<int>(kv.get_int("M_tr", c.M_tr));
  c.peak_lr = kv.get_double("peak_lr", c.peak_lr);
  c.warmup_steps = kv.get_int("warmup_steps", c.warmup_steps);
  c.floor_lr = kv.get_double("floor_lr", c.floor_lr);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.beta1 = kv.get_double("adam_beta1", c.beta1);
  c.beta2 = kv.get_double("adam_beta2", c.beta2);
  c.eps = kv.get_double("adam_eps", c.eps);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  c.conditioning.transformer = !kv.get_bool("no_transformer_cond", false);
  c.conditioning.predictor = !kv.get_bool("no_predictor_cond", false);
  const auto mode = kv.get_string("target_mode", "ema");
  if (mode == "ema") {
    c.target_mode = TargetMode::ema_stop_gradient;
  } else if (mode == "online_no_stop_grad") {
    c.target_mode = TargetMode::online_no_stop_grad;
  } else {
    throw ConfigError("target_mode: expected ema or online_no_stop_grad, got '" + mode + "'");
  }
  c.checkpoint_every = kv.get_int("checkpoint_every", c.checkpoint_every);
  c.max_retries = static_cast<int>(kv.get_int("max_retries", c.max_retries));
  c.validate();
  return c;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  const double lo = cfg.floor_lr;
  const double hi = cfg.peak_lr;
  if (step <= 0) return cfg.warmup_steps == 0 ? hi : lo;
  if (step >= cfg.total_steps) return lo;
  if (step <= cfg.warmup_steps) return lo + (hi - lo) * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return lo + (hi - lo) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::finalize() {
  world.validate();
  train.validate();
  const World w(world);
  model.encoder.channels = w.view_channels();
  model.encoder.height = w.view_height();
  model.encoder.width = w.view_width();
  model.action_dim = w.action_dim();
  model.total_steps = train.total_steps;
  model.validate();
}

KeyValueConfig RunConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("version", std::to_string(kConfigVersion));
  model.write(kv);
  train.write(kv);
  world.write(kv);
  return kv;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(text()); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k{"version"};
  for (auto* list : {&ModelConfig::keys, &TrainConfig::keys, &WorldConfig::keys}) {
    for (auto& key : (*list)()) k.push_back(key);
  }
  return k;
}

RunConfig RunConfig::from_kv(const KeyValueConfig& kv) {
  kv.require_known(keys());
  RunConfig c;
  c.world = WorldConfig::read(kv);
  c.train = TrainConfig::read(kv);
  c.model = ModelConfig::read(kv);
  if (!kv.contains("init_seed")) c.model.init_seed = c.train.seed;
  c.finalize();
  auto check = [&](const char* key, std::int64_t derived) {
    if (kv.contains(key) && kv.get_int(key, 0) != derived) {
      throw ConfigError(std::string(key) + ": " + std::to_string(kv.get_int(key, 0)) +
                        " disagrees with the world/training settings (" + std::to_string(derived) + ")");
    }
  };
  check("image_channels", c.model.encoder.channels);
  check("image_height", c.model.encoder.height);
  check("image_width", c.model.encoder.width);
  check("action_dim", c.model.action_dim);
  return c;
}

std::vector<std::string> preset_names() { return {"desk", "fast", "paper"}; }

KeyValueConfig preset_config(const std::string& name) {
  KeyValueConfig kv;
  if (name == "desk") return kv;
  if (name == "fast") {
    kv.set("resolution", "32");
    kv.set("d_z", "64");
    kv.set("d_a", "32");
    kv.set("encoder_layers", "8,16,32,64");
    kv.set("total_steps", "1000");
    kv.set("warmup_steps", "100");
    return kv;
  }
  if (name == "paper") {
    kv.set("batch_size", "512");
    kv.set("d_z", "512");
    kv.set("d_a", "128");
    kv.set("encoder_layers", "64,128,256,512");
    kv.set("predictor_hidden", "1024");
    kv.set("aggregator_layers", "3");
    kv.set("aggregator_heads", "4");
    return kv;
  }
  throw ConfigError("preset: expected desk, fast or paper, got '" + name + "'");
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(const ParameterList<float>& params, Options opts) : opts_(opts) {
  for (const auto& p : params) {
    m_.push_back(ad::Matrix<float>::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(ad::Matrix<float>::Zero(p.var.rows(), p.var.cols()));
  }
}

void AdamW::step(const ParameterList<float>& params, double lr) {
  if (params.size() != m_.size()) throw ShapeError("AdamW: parameter list changed size");
  ++t_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const float step_size = static_cast<float>(lr / c1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const float eps = static_cast<float>(opts_.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto var = params[i].var;
    if (!var.has_grad()) continue;
    const ad::Matrix<float>& g = var.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    m = static_cast<float>(b1) * m + static_cast<float>(1 - b1) * g;
    v = static_cast<float>(b2) * v + static_cast<float>(1 - b2) * g.cwiseProduct(g);
    ad::Matrix<float>& w = var.mutable_value();
    if (params[i].decay && opts_.weight_decay > 0) w *= static_cast<float>(1.0 - lr * opts_.weight_decay);
    w.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_c2 + eps);
  }
}

double clip_grad_norm(const ParameterList<float>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (p.var.has_grad()) sq += p.var.grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (const auto& p : params) {
      auto var = p.var;
      if (var.has_grad()) var.node()->grad_buffer() *= s;
    }
  }
  return norm;
}

std::string to_json(const TrainRecord& r, bool include_wall_time) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["cosine"] = r.cosine;
  j["collapse_std"] = r.collapse_std;
  j["lr"] = r.lr;
  j["tau"] = r.tau;
  if (include_wall_time) j["wall_ms"] = r.wall_ms;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Batching

Episode sample_with_retry(const World& world, std::uint64_t seed, std::uint64_t stream, int M, int max_retries,
                          bool keep_scene) {
  for (int attempt = 0;; ++attempt) {
    try {
      return world.sample(seed, stream, M, keep_scene, attempt);
    } catch (const ExhaustedSaliencyError& e) {
      if (attempt + 1 >= max_retries) {
        throw ExhaustedSaliencyError("stream " + std::to_string(stream) + ": saliency exhausted after " +
                                     std::to_string(max_retries) + " attempts (" + e.what() + ")");
      }
    }
  }
}

ad::Matrix<float> views_to_rows(const std::vector<const Image*>& views) {
  if (views.empty()) return {};
  const auto width = static_cast<ad::Index>(views.front()->size());
  ad::Matrix<float> out(static_cast<ad::Index>(views.size()), width);
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (static_cast<ad::Index>(views[i]->size()) != width) throw ShapeError("views differ in shape");
    out.row(static_cast<ad::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXf>(views[i]->pixels.data(), width);
  }
  return out;
}

EpisodeBatch<float> to_batch(const std::vector<Episode>& episodes, int m) {
  if (episodes.empty()) throw ConfigError("to_batch: no episodes");
  EpisodeBatch<float> b;
  b.batch = static_cast<ad::Index>(episodes.size());
  b.seq = m;
  std::vector<const Image*> ctx, tgt;
  const int width = tuple_width(episodes.front().kinds);
  b.actions.resize(b.batch * m, width);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    if (ep.length() < m) {
      throw SequenceError("to_batch: episode has " + std::to_string(ep.length()) + " actions, need " + std::to_string(m));
    }
    for (int i = 0; i < m; ++i) {
      ctx.push_back(&ep.views[static_cast<std::size_t>(i)]);
      const auto flat = flatten(ep.actions[static_cast<std::size_t>(i)]);
      for (int j = 0; j < width; ++j) b.actions(static_cast<ad::Index>(e) * m + i, j) = static_cast<float>(flat[j]);
    }
    tgt.push_back(&ep.views[static_cast<std::size_t>(m)]);
  }
  b.context = views_to_rows(ctx);
  b.target = views_to_rows(tgt);
  return b;
}

EpisodeBatch<float> make_batch(const World& world, std::uint64_t seed, std::int64_t step, int batch_size, int M,
                               int max_retries) {
  std::vector<Episode> eps;
  eps.reserve(static_cast<std::size_t>(batch_size));
  const auto base = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size);
  for (int b = 0; b < batch_size; ++b) eps.push_back(sample_with_retry(world, seed, base + b, M, max_retries));
  return to_batch(eps, M);
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

RunConfig finalized(RunConfig cfg) {
  cfg.finalize();
  return cfg;
}

AdamW::Options adam_options(const TrainConfig& t) { return {t.beta1, t.beta2, t.eps, t.weight_decay}; }

NamedArray to_array(const std::string& name, const ad::Matrix<float>& m) {
  return {name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
          std::vector<float>(m.data(), m.data() + m.size())};
}

void from_array(const Checkpoint& ckpt, const std::string& name, ad::Matrix<float>& dst) {
  const NamedArray* a = ckpt.find(name);
  if (!a) throw FormatError("checkpoint lacks array '" + name + "'");
  if (a->dims.size() != 2 || a->dims[0] != static_cast<std::uint64_t>(dst.rows()) ||
      a->dims[1] != static_cast<std::uint64_t>(dst.cols())) {
    throw FormatError("checkpoint array '" + name + "' has the wrong shape");
  }
  std::copy(a->data.begin(), a->data.end(), dst.data());
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = RunConfig::from_kv(KeyValueConfig::parse(ckpt.config_text));
  if (cfg.hash() != ckpt.manifest.config_hash) {
    throw FormatError("checkpoint config does not reproduce its recorded hash");
  }
  return cfg;
}

/// Copies parameter values from the checkpoint into `state`. All arrays
/// are validated before any value is written.
void restore_parameters(const Checkpoint& ckpt, ModelState<float>& state) {
  std::vector<std::pair<const NamedParameter<float>*, const NamedArray*>> plan;
  for (const auto* list : {&state.online_parameters(), &state.target_parameters(), &state.buffers()}) {
    for (const auto& p : *list) {
      const NamedArray* a = ckpt.find(p.name);
      if (!a) throw FormatError("checkpoint lacks parameter '" + p.name + "'");
      if (a->dims.size() != 2 || a->dims[0] != static_cast<std::uint64_t>(p.var.rows()) ||
          a->dims[1] != static_cast<std::uint64_t>(p.var.cols())) {
        throw FormatError("checkpoint parameter '" + p.name + "' has the wrong shape");
      }
      plan.emplace_back(&p, a);
    }
  }
  for (auto [p, a] : plan) {
    auto var = p->var;
    std::copy(a->data.begin(), a->data.end(), var.mutable_value().data());
  }
  state.set_step(ckpt.manifest.step);
}

}  // namespace

Trainer::Trainer(RunConfig cfg)
    : cfg_(finalized(std::move(cfg))),
      world_(cfg_.world),
      state_(cfg_.model),
      opt_(state_.online_parameters(), adam_options(cfg_.train)) {}

Trainer Trainer::from_checkpoint(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  Trainer t(config_from_checkpoint(ckpt));
  restore_parameters(ckpt, t.state_);
  const auto& params = t.state_.online_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    from_array(ckpt, "adam.m." + params[i].name, t.opt_.first_moments()[i]);
    from_array(ckpt, "adam.v." + params[i].name, t.opt_.second_moments()[i]);
  }
  t.opt_.set_steps(ckpt.manifest.optimizer_steps);
  return t;
}

TrainRecord Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::int64_t k = state_.step();
  if (k >= cfg_.train.total_steps) throw ConfigError("training already reached total_steps");
  const auto& tc = cfg_.train;
  const EpisodeBatch<float> batch = make_batch(world_, tc.seed, k, tc.batch_size, tc.M_tr, tc.max_retries);
  // The forward pass moves the running norm statistics; keep a copy so a
  // rejected step leaves the state untouched.
  std::vector<ad::Matrix<float>> saved_buffers;
  for (const auto& b : state_.buffers()) saved_buffers.push_back(b.var.value());
  auto restore_buffers = [&] {
    for (std::size_t i = 0; i < saved_buffers.size(); ++i) {
      auto var = state_.buffers()[i].var;
      var.mutable_value() = saved_buffers[i];
    }
  };
  StepResult<float> res;
  try {
    res = state_.forward_train_step(batch, tc.conditioning, tc.target_mode);
  } catch (const NumericDegeneracyError& e) {
    restore_buffers();
    throw NumericDegeneracyError("step " + std::to_string(k) + ": " + e.what());
  }
  if (!std::isfinite(res.loss.loss)) {
    restore_buffers();
    throw NumericDegeneracyError("step " + std::to_string(k) + ": non-finite loss");
  }
  const double lr = lr_at(k, tc);
  clip_grad_norm(state_.online_parameters(), tc.grad_clip);
  opt_.step(state_.online_parameters(), lr);
  const double tau = state_.current_tau();
  if (tc.target_mode == TargetMode::ema_stop_gradient) state_.ema_update();
  state_.set_step(k + 1);

  TrainRecord r;
  r.step = k;
  r.loss = res.loss.loss;
  r.cosine = res.loss.cosine;
  r.collapse_std = res.loss.collapse_std;
  r.lr = lr;
  r.tau = tau;
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<TrainRecord> Trainer::run(std::int64_t until, const std::function<void(const TrainRecord&)>& on_record) {
  std::vector<TrainRecord> out;
  until = std::min(until, cfg_.train.total_steps);
  while (state_.step() < until) {
    out.push_back(step());
    if (on_record) on_record(out.back());
  }
  return out;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint c;
  c.config_text = cfg_.text();
  c.manifest.config_hash = fnv1a64(c.config_text);
  c.manifest.step = state_.step();
  c.manifest.tau = state_.current_tau();
  c.manifest.seed = cfg_.train.seed;
  c.manifest.optimizer_steps = opt_.steps();
  for (const auto* list : {&state_.online_parameters(), &state_.target_parameters(), &state_.buffers()}) {
    for (const auto& p : *list) c.arrays.push_back(to_array(p.name, p.var.value()));
  }
  const auto& params = state_.online_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.arrays.push_back(to_array("adam.m." + params[i].name, opt_.first_moments()[i]));
    c.arrays.push_back(to_array("adam.v." + params[i].name, opt_.second_moments()[i]));
  }
  return c;
}

LoadedModel load_model(const std::string& checkpoint_path) {
  const Checkpoint ckpt = read_checkpoint(checkpoint_path);
  RunConfig cfg = config_from_checkpoint(ckpt);
  LoadedModel m{cfg, ModelState<float>(cfg.model)};
  restore_parameters(ckpt, m.state);
  return m;
}

TrainResult train(const RunConfig& cfg, const std::function<void(const TrainRecord&)>& on_record) {
  Trainer t(cfg);
  auto records = t.run(t.config().train.total_steps, on_record);
  return {std::move(t.state()), std::move(records)};
}

double trailing_mean(const std::vector<TrainRecord>& records, std::size_t window) {
  if (records.empty()) return 0;
  const std::size_t n = std::min(window, records.size());
  double s = 0;
  for (std::size_t i = records.size() - n; i < records.size(); ++i) s += records[i].loss;
  return s / static_cast<double>(n);
}

TrainSummary train_to_directory(Trainer& trainer, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const bool resuming = trainer.state().step() > 0;
  const auto mode = resuming ? std::ios::app : std::ios::trunc;
  std::ofstream metrics(fs::path(dir) / "metrics.jsonl", mode);
  std::ofstream timing(fs::path(dir) / "timing.jsonl", mode);
  if (!metrics || !timing) throw Error("cannot write metrics in '" + dir + "'");
  const std::int64_t every = trainer.config().train.checkpoint_every;
  std::vector<TrainRecord> records;
  while (!trainer.done()) {
    const TrainRecord r = trainer.step();
    records.push_back(r);
    metrics << to_json(r) << "\n";
    timing << nlohmann::json{{"step", r.step}, {"wall_ms", r.wall_ms}}.dump() << "\n";
    if (every > 0 && trainer.state().step() % every == 0 && !trainer.done()) {
      metrics.flush();
      trainer.save((fs::path(dir) / ("ckpt_" + std::to_string(trainer.state().step()) + ".bin")).string());
    }
  }
  metrics.flush();
  TrainSummary s;
  s.steps = trainer.state().step();
  s.final_loss = records.empty() ? 0 : records.back().loss;
  s.final_smoothed_loss = trailing_mean(records, 20);
  s.config_hash = hex64(trainer.config().hash());
  s.checkpoint = (fs::path(dir) / "final.bin").string();
  trainer.save(s.checkpoint);
  nlohmann::ordered_json j;
  j["steps"] = s.steps;
  j["final_loss"] = s.final_loss;
  j["final_smoothed_loss"] = s.final_smoothed_loss;
  j["config_hash"] = s.config_hash;
  j["checkpoint"] = s.checkpoint;
  std::ofstream(fs::path(dir) / "summary.json") << j.dump(2) << "\n";
  return s;
}

}  // namespace seqjepa
