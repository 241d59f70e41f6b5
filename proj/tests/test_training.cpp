// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "seqjepa/errors.hpp"
#include "seqjepa/training.hpp"

using namespace seqjepa;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(std::int64_t steps = 6, std::uint64_t seed = 3) {
  KeyValueConfig kv;
  kv.set("world", "sprite");
  kv.set("resolution", "16");
  kv.set("d_z", "16");
  kv.set("d_a", "8");
  kv.set("encoder_layers", "4,8");
  kv.set("aggregator_layers", "1");
  kv.set("aggregator_heads", "2");
  kv.set("predictor_hidden", "32");
  kv.set("batch_size", "8");
  kv.set("M_tr", "2");
  kv.set("total_steps", std::to_string(steps));
  kv.set("warmup_steps", "1");
  kv.set("seed", std::to_string(seed));
  return RunConfig::from_kv(kv);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("seqjepa_test_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool same_records(const std::vector<TrainRecord>& a, const std::vector<TrainRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (to_json(a[i]) != to_json(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("learning-rate schedule anchors and shape") {
  TrainConfig c;  // 2000 steps, 200 warmup, 4e-4 peak, 1e-5 floor
  CHECK(lr_at(0, c) == 1e-5);
  CHECK(lr_at(c.warmup_steps, c) == doctest::Approx(4e-4).epsilon(1e-15));
  CHECK(lr_at(c.total_steps, c) == 1e-5);
  CHECK(lr_at(100, c) == doctest::Approx(1e-5 + 0.5 * (4e-4 - 1e-5)));
  CHECK(lr_at(1100, c) == doctest::Approx(1e-5 + 0.5 * (4e-4 - 1e-5)));
  for (std::int64_t k = 1; k <= c.total_steps; ++k) {
    const double d = lr_at(k, c) - lr_at(k - 1, c);
    if (k <= c.warmup_steps) {
      CHECK(d > 0);
    } else {
      CHECK(d <= 0);
    }
    CHECK(std::abs(d) < 3e-6);  // continuous: no jumps larger than one warmup increment
  }
}

TEST_CASE("AdamW matches a hand-computed step") {
  ParameterList<float> params;
  auto w = ad::Var<float>::parameter(ad::Matrix<float>{{1.0f, -2.0f}});
  auto b = ad::Var<float>::parameter(ad::Matrix<float>{{0.5f, 0.5f}});
  params.push_back({"w", w, true});
  params.push_back({"b", b, false});
  AdamW opt(params, {0.9, 0.999, 1e-8, 0.1});
  const ad::Matrix<float> g{{0.3f, -0.6f}};
  auto set_grad = [&] {
    zero_grads(params);
    ad::backward(ad::sum(ad::add(ad::mul(w, ad::Var<float>::constant(g)), ad::mul(b, ad::Var<float>::constant(g)))));
  };
  set_grad();
  opt.step(params, 0.01);
  // Bias-corrected moments equal g and g^2 after one step: the update is
  // lr * g / (|g| + eps), plus decoupled decay on w only.
  const double w0 = 1.0 * (1 - 0.01 * 0.1) - 0.01 * 0.3 / (0.3 + 1e-8);
  const double w1 = -2.0 * (1 - 0.01 * 0.1) + 0.01 * 0.6 / (0.6 + 1e-8);
  CHECK(w.value()(0, 0) == doctest::Approx(w0).epsilon(1e-6));
  CHECK(w.value()(0, 1) == doctest::Approx(w1).epsilon(1e-6));
  CHECK(b.value()(0, 0) == doctest::Approx(0.5 - 0.01).epsilon(1e-6));

  // Second step with the same gradient: m_hat = g, v_hat = g^2 again.
  set_grad();
  opt.step(params, 0.01);
  CHECK(w.value()(0, 0) == doctest::Approx(w0 * (1 - 0.001) - 0.01).epsilon(1e-6));
  CHECK(opt.steps() == 2);
}

TEST_CASE("global-norm clipping") {
  ParameterList<float> params;
  auto a = ad::Var<float>::parameter(ad::Matrix<float>::Zero(1, 2));
  auto c = ad::Var<float>::parameter(ad::Matrix<float>::Zero(1, 1));
  params.push_back({"a", a, true});
  params.push_back({"c", c, true});
  auto grads = [&](float x, float y, float z) {
    zero_grads(params);
    ad::backward(ad::add(ad::sum(ad::mul(a, ad::Var<float>::constant(ad::Matrix<float>{{x, y}}))),
                         ad::sum(ad::mul(c, ad::Var<float>::constant(ad::Matrix<float>{{z}})))));
  };
  grads(6, 0, 8);  // norm 10
  CHECK(clip_grad_norm(params, 5.0) == doctest::Approx(10.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(3.0));
  CHECK(c.grad()(0, 0) == doctest::Approx(4.0));
  grads(0.3f, 0, 0.4f);  // under the bound: untouched
  CHECK(clip_grad_norm(params, 5.0) == doctest::Approx(0.5));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.3));
  grads(6, 0, 8);  // 0 disables
  clip_grad_norm(params, 0.0);
  CHECK(a.grad()(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("run config validation and hashing") {
  const RunConfig c = tiny_config();
  CHECK(RunConfig::from_kv(KeyValueConfig::parse(c.text())).hash() == c.hash());
  CHECK(c.model.action_dim == 4);
  CHECK(c.model.encoder.height == 16);

  auto kv = c.to_kv();
  kv.set("not_a_key", "1");
  CHECK_THROWS_AS(RunConfig::from_kv(kv), ConfigError);
  kv = c.to_kv();
  kv.set("warmup_steps", "6");
  CHECK_THROWS_AS(RunConfig::from_kv(kv), ConfigError);
  kv = c.to_kv();
  kv.set("image_height", "32");
  CHECK_THROWS_AS(RunConfig::from_kv(kv), ConfigError);
  kv = c.to_kv();
  kv.set("peak_lr", "0");
  CHECK_THROWS_AS(RunConfig::from_kv(kv), ConfigError);
  kv = c.to_kv();
  kv.set("M_tr", "0");
  CHECK_THROWS_AS(RunConfig::from_kv(kv), ConfigError);

  RunConfig other = c;
  other.train.seed = 4;
  CHECK(other.hash() != c.hash());
}

TEST_CASE("records: loss range, schedule, json") {
  Trainer t(tiny_config());
  const auto recs = t.run(6);
  REQUIRE(recs.size() == 6);
  for (const auto& r : recs) {
    CHECK(r.loss >= 0.0);
    CHECK(r.loss <= 2.0);
    CHECK(r.lr == lr_at(r.step, t.config().train));
    CHECK(r.tau == ema_tau(t.config().model.ema_tau_base, r.step, 6));
  }
  CHECK(t.done());
  CHECK_THROWS_AS(t.step(), ConfigError);
  CHECK(to_json(recs[0]).find("wall_ms") == std::string::npos);
  CHECK(to_json(recs[0], true).find("wall_ms") != std::string::npos);
}

TEST_CASE("identical seeds give identical runs; different seeds do not") {
  const auto a = train(tiny_config(5, 11)).records;
  const auto b = train(tiny_config(5, 11)).records;
  const auto c = train(tiny_config(5, 12)).records;
  CHECK(same_records(a, b));
  CHECK_FALSE(same_records(a, c));
}

TEST_CASE("target parameters move only through the EMA") {
  auto cfg = tiny_config();
  cfg.train.target_mode = TargetMode::online_no_stop_grad;
  Trainer t(cfg);
  const auto before = parameter_hash(t.state().target_parameters());
  const auto online_before = parameter_hash(t.state().online_parameters());
  t.run(2);
  CHECK(parameter_hash(t.state().target_parameters()) == before);
  CHECK(parameter_hash(t.state().online_parameters()) != online_before);

  Trainer e(tiny_config());
  e.run(1);
  CHECK(parameter_hash(e.state().target_parameters()) != before);
}

TEST_CASE("checkpoints: byte-identical round trip and corruption errors") {
  const auto dir = scratch("ckpt");
  Trainer t(tiny_config());
  t.run(3);
  const auto p1 = (dir / "a.bin").string();
  const auto p2 = (dir / "b.bin").string();
  t.save(p1);
  Trainer::from_checkpoint(p1).save(p2);
  CHECK(slurp(p1) == slurp(p2));
  const Checkpoint ck = read_checkpoint(p1);
  CHECK(ck.manifest.step == 3);
  CHECK(ck.manifest.tau == t.state().current_tau());
  CHECK(ck.manifest.config_hash == t.config().hash());

  const auto loaded = load_model(p1);
  CHECK(parameter_hash(loaded.state.online_parameters()) == parameter_hash(t.state().online_parameters()));
  CHECK(parameter_hash(loaded.state.target_parameters()) == parameter_hash(t.state().target_parameters()));
  CHECK(parameter_hash(loaded.state.buffers()) == parameter_hash(t.state().buffers()));

  const std::string bytes = slurp(p1);
  auto write_bytes = [&](const std::string& name, const std::string& data) {
    const auto p = (dir / name).string();
    std::ofstream(p, std::ios::binary) << data;
    return p;
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x40);
  CHECK_THROWS_AS(read_checkpoint(write_bytes("flip.bin", flipped)), FormatError);
  CHECK_THROWS_AS(read_checkpoint(write_bytes("trunc.bin", bytes.substr(0, bytes.size() - 9))), FormatError);
  std::string version = bytes;
  version[4] = 7;
  CHECK_THROWS_AS(read_checkpoint(write_bytes("ver.bin", version)), FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(read_checkpoint(write_bytes("magic.bin", magic)), FormatError);
  CHECK_THROWS_AS(load_model((dir / "missing.bin").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("split run resumes into the uninterrupted record stream") {
  const auto dir = scratch("resume");
  const auto full = train(tiny_config(6)).records;

  Trainer first(tiny_config(6));
  auto recs = first.run(2);
  first.save((dir / "mid.bin").string());
  Trainer second = Trainer::from_checkpoint((dir / "mid.bin").string());
  for (const auto& r : second.run(6)) recs.push_back(r);
  CHECK(same_records(full, recs));

  Trainer ref(tiny_config(6));
  ref.run(6);
  CHECK(parameter_hash(ref.state().online_parameters()) == parameter_hash(second.state().online_parameters()));
  CHECK(parameter_hash(ref.state().target_parameters()) == parameter_hash(second.state().target_parameters()));
  fs::remove_all(dir);
}

TEST_CASE("training directory: metrics, checkpoints, summary, append on resume") {
  const auto dir = scratch("dir");
  auto cfg = tiny_config(6);
  cfg.train.checkpoint_every = 2;
  Trainer t(cfg);
  const auto s = train_to_directory(t, dir.string());
  CHECK(s.steps == 6);
  CHECK(fs::exists(dir / "ckpt_2.bin"));
  CHECK(fs::exists(dir / "ckpt_4.bin"));
  CHECK(fs::exists(dir / "final.bin"));
  CHECK(fs::exists(dir / "summary.json"));
  const auto metrics = slurp(dir / "metrics.jsonl");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 6);

  Trainer resumed = Trainer::from_checkpoint((dir / "ckpt_4.bin").string());
  const auto dir2 = scratch("dir2");
  fs::copy_file(dir / "metrics.jsonl", dir2 / "metrics.jsonl");
  // Keep the first four lines, as if the run had stopped after ckpt_4.
  {
    std::istringstream in(metrics);
    std::string line, head;
    for (int i = 0; i < 4 && std::getline(in, line); ++i) head += line + "\n";
    std::ofstream(dir2 / "metrics.jsonl", std::ios::trunc) << head;
  }
  train_to_directory(resumed, dir2.string());
  CHECK(slurp(dir2 / "metrics.jsonl") == metrics);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("degenerate loss aborts with the step and leaves the state untouched") {
  Trainer t(tiny_config());
  t.run(1);
  for (const auto& p : t.state().online_parameters()) {
    if (p.name.rfind("encoder.head", 0) == 0) {
      auto v = p.var;
      v.mutable_value().setZero();
    }
  }
  for (const auto& p : t.state().target_parameters()) {
    if (p.name.rfind("target_encoder.head", 0) == 0) {
      auto v = p.var;
      v.mutable_value().setZero();
    }
  }
  const auto online = parameter_hash(t.state().online_parameters());
  const auto target = parameter_hash(t.state().target_parameters());
  const auto buffers = parameter_hash(t.state().buffers());
  try {
    t.step();
    FAIL("expected NumericDegeneracyError");
  } catch (const NumericDegeneracyError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  CHECK(t.state().step() == 1);
  CHECK(parameter_hash(t.state().online_parameters()) == online);
  CHECK(parameter_hash(t.state().target_parameters()) == target);
  CHECK(parameter_hash(t.state().buffers()) == buffers);
}

TEST_CASE("exhausted saliency retries a bounded number of times") {
  KeyValueConfig kv;
  kv.set("world", "saccade");
  kv.set("ior_radius", "400");
  const auto cfg = WorldConfig::read(kv);
  const World w(cfg);
  CHECK_THROWS_AS(sample_with_retry(w, 1, 0, 2, 3), ExhaustedSaliencyError);
  CHECK_NOTHROW(sample_with_retry(World(WorldConfig::read(KeyValueConfig{})), 1, 0, 2, 3));
}

TEST_CASE("smoke: 300 steps on the sprite world cut the smoothed loss by 30%") {
  KeyValueConfig kv;
  kv.set("world", "sprite");
  kv.set("resolution", "32");
  kv.set("d_z", "64");
  kv.set("d_a", "32");
  kv.set("encoder_layers", "8,16,32,64");
  kv.set("batch_size", "64");
  kv.set("M_tr", "2");
  kv.set("total_steps", "300");
  kv.set("warmup_steps", "30");
  kv.set("seed", "1");
  const auto recs = train(RunConfig::from_kv(kv)).records;
  REQUIRE(recs.size() == 300);
  const std::vector<TrainRecord> head(recs.begin(), recs.begin() + 20);
  const double initial = trailing_mean(head, 20);
  const double final = trailing_mean(recs, 20);
  MESSAGE("smoothed loss " << initial << " -> " << final);
  CHECK(final <= 0.7 * initial);
}
