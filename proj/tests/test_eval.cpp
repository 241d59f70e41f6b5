// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "seqjepa/errors.hpp"
#include "seqjepa/eval.hpp"
#include "seqjepa/saliency.hpp"

using namespace seqjepa;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const std::string& world, std::int64_t steps = 4, std::uint64_t seed = 5) {
  KeyValueConfig kv;
  kv.set("world", world);
  if (world == "sprite") kv.set("resolution", "16");
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

EvalOptions small_eval() {
  EvalOptions e;
  e.train_episodes = 120;
  e.regression_train_episodes = 120;
  e.test_episodes = 60;
  e.probe.epochs = 3;
  e.probe.hidden = 32;
  return e;
}

FeatureMatrix gaussian(int rows, int cols, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  FeatureMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Clusters at well separated centres, label = cluster.
void clusters(int per_class, int classes, unsigned seed, FeatureMatrix& x, std::vector<int>& y, double spread = 0.3) {
  const FeatureMatrix centres = gaussian(classes, 8, 999, 3.0);
  x = gaussian(per_class * classes, 8, seed, spread);
  y.clear();
  for (int i = 0; i < per_class * classes; ++i) {
    x.row(i) += centres.row(i % classes);
    y.push_back(i % classes);
  }
}

}  // namespace

TEST_CASE("R2 hand case and identities") {
  FeatureMatrix t(3, 1), p(3, 1);
  t << 1, 2, 3;
  p << 1, 2, 2;
  CHECK(r2_score(p, t).r2 == 0.5);

  const FeatureMatrix y = gaussian(50, 3, 1);
  CHECK(r2_score(y, y).r2 == 1.0);
  FeatureMatrix mean = y;
  for (Eigen::Index c = 0; c < y.cols(); ++c) mean.col(c).setConstant(y.col(c).mean());
  CHECK(std::abs(r2_score(mean, y).r2) < 1e-12);

  const FeatureMatrix pred = y + gaussian(50, 3, 2, 0.5);
  const double base = r2_score(pred, y).r2;
  const FeatureMatrix p2 = (pred.array() * -3.7 + 11.0).matrix();
  const FeatureMatrix y2 = (y.array() * -3.7 + 11.0).matrix();
  CHECK(r2_score(p2, y2).r2 == doctest::Approx(base).epsilon(1e-12));
  CHECK(base <= 1.0);
}

TEST_CASE("zero-variance target components are excluded and reported") {
  FeatureMatrix t = gaussian(20, 3, 3);
  t.col(1).setConstant(0.7);
  const auto r = r2_score(t, t);
  REQUIRE(r.excluded.size() == 1);
  CHECK(r.excluded[0] == 1);
  CHECK(std::isnan(r.per_component[1]));
  CHECK(r.r2 == 1.0);
  FeatureMatrix flat = FeatureMatrix::Constant(5, 2, 1.0);
  CHECK_THROWS_AS(r2_score(flat, flat), ConfigError);
  CHECK_THROWS_AS(r2_score(FeatureMatrix(5, 2), FeatureMatrix(4, 2)), ShapeError);
}

TEST_CASE("regression heads fit linear and nonlinear maps") {
  const FeatureMatrix x = gaussian(2000, 4, 4);
  const FeatureMatrix xt = gaussian(500, 4, 5);
  auto linear_map = [](const FeatureMatrix& in) {
    FeatureMatrix out(in.rows(), 2);
    out.col(0) = 2 * in.col(0) - in.col(3);
    out.col(1) = (0.5 * in.col(1)).array() + 4;
    return out;
  };
  ProbeOptions po;
  po.seed = 9;
  CHECK(regression_r2(x, linear_map(x), xt, linear_map(xt), ProbeHead::linear, po).r2 > 0.99);

  auto bumpy = [](const FeatureMatrix& in) {
    FeatureMatrix out(in.rows(), 1);
    out.col(0) = in.col(0).array().abs() + in.col(1).array() * in.col(2).array();
    return out;
  };
  po.hidden = 128;
  const double mlp = regression_r2(x, bumpy(x), xt, bumpy(xt), ProbeHead::mlp_1024, po).r2;
  const double lin = regression_r2(x, bumpy(x), xt, bumpy(xt), ProbeHead::linear, po).r2;
  CHECK(mlp > 0.9);
  CHECK(lin < 0.2);
  CHECK(po.lr_for(ProbeHead::linear) == 1e-2);
  CHECK(po.lr_for(ProbeHead::mlp_1024) == 1e-3);
}

TEST_CASE("head mapping follows the action kind") {
  CHECK(head_for(ActionKind::rotation_quat) == ProbeHead::mlp_1024);
  CHECK(head_for(ActionKind::jitter_params) == ProbeHead::mlp_1024);
  CHECK(head_for(ActionKind::crop_params) == ProbeHead::mlp_1024);
  CHECK(head_for(ActionKind::saccade) == ProbeHead::linear);
  CHECK(head_for(ActionKind::hue_delta) == ProbeHead::linear);
  CHECK(head_for(ActionKind::blur_param) == ProbeHead::linear);
  CHECK(head_for(ActionKind::position_delta) == ProbeHead::linear);
  ProbeOptions po;
  CHECK(po.epochs_for(ProbeHead::linear) == 50);
  CHECK(po.epochs_for(ProbeHead::mlp_1024) == 100);
  CHECK(po.batch_size == 256);
}

TEST_CASE("linear probe: separable, shuffled, duplicated, degenerate") {
  FeatureMatrix xtr, xte;
  std::vector<int> ytr, yte;
  clusters(100, 2, 10, xtr, ytr);
  clusters(100, 2, 11, xte, yte);
  CHECK(linear_probe(xtr, ytr, xte, yte) >= 0.99);

  // Shuffled labels: chance level within 3 binomial sigma.
  constexpr int C = 5;
  clusters(200, C, 12, xtr, ytr);
  clusters(200, C, 13, xte, yte);
  std::mt19937_64 rng(14);
  std::shuffle(ytr.begin(), ytr.end(), rng);
  std::shuffle(yte.begin(), yte.end(), rng);
  const double acc = linear_probe(xtr, ytr, xte, yte);
  const double n = static_cast<double>(yte.size());
  const double sigma = std::sqrt((1.0 / C) * (1 - 1.0 / C) / n);
  CHECK(std::abs(acc - 1.0 / C) <= 3 * sigma);

  // Duplicated rows with consistent labels.
  clusters(50, 3, 15, xtr, ytr);
  clusters(100, 3, 16, xte, yte);
  FeatureMatrix dup(2 * xtr.rows(), xtr.cols());
  dup << xtr, xtr;
  std::vector<int> ydup = ytr;
  ydup.insert(ydup.end(), ytr.begin(), ytr.end());
  CHECK(linear_probe(dup, ydup, xte, yte) == linear_probe(xtr, ytr, xte, yte));

  std::vector<int> one(ytr.size(), 2);
  CHECK_THROWS_AS(linear_probe(xtr, one, xte, yte), ConfigError);
  CHECK_THROWS_AS(linear_probe(xtr, std::vector<int>(3, 0), xte, yte), ShapeError);
}

TEST_CASE("rank metrics match brute-force recomputation") {
  std::mt19937_64 rng(20);
  std::uniform_int_distribution<int> coarse(0, 4);  // many ties on purpose
  std::uniform_int_distribution<int> pick(0, 19);
  Eigen::MatrixXd sim(300, 20);
  std::vector<int> truth;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = 0; j < sim.cols(); ++j) sim(i, j) = coarse(rng) * 0.25;
    truth.push_back(pick(rng));
  }
  const auto r = rank_metrics(sim, truth);
  // Brute force: sort candidate indices by (similarity desc, index asc).
  double mrr = 0, h1 = 0, h5 = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    std::vector<int> order(20);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sim(i, a) > sim(i, b); });
    const int rank = static_cast<int>(std::find(order.begin(), order.end(), truth[static_cast<std::size_t>(i)]) -
                                      order.begin()) + 1;
    CHECK(rank == r.ranks[static_cast<std::size_t>(i)]);
    mrr += 1.0 / rank;
    h1 += rank == 1;
    h5 += rank <= 5;
  }
  CHECK(r.mrr == mrr / 300);
  CHECK(r.hit1 == h1 / 300);
  CHECK(r.hit5 == h5 / 300);
  CHECK(r.hit5 >= r.hit1);
  CHECK(r.mrr >= r.hit1 + (1 - r.hit1) / 20.0);

  // All candidates tied: the true index alone decides the rank.
  const auto tied = rank_metrics(Eigen::MatrixXd::Zero(3, 6), {0, 3, 5});
  CHECK(tied.ranks == std::vector<int>{1, 4, 6});
}

TEST_CASE("random and oracle predictors") {
  // Random predictions against random candidates: uniform ranks.
  constexpr int n = 20, episodes = 1000;
  const FeatureMatrix pred = gaussian(episodes, 16, 30);
  std::vector<FeatureMatrix> cands;
  std::vector<int> truth;
  std::mt19937_64 rng(31);
  for (int i = 0; i < episodes; ++i) {
    cands.push_back(gaussian(n, 16, 1000 + static_cast<unsigned>(i)));
    truth.push_back(static_cast<int>(rng() % n));
  }
  double expected = 0;
  for (int r = 1; r <= n; ++r) expected += 1.0 / r;
  expected /= n;
  CHECK(expected == doctest::Approx(0.17989).epsilon(1e-4));
  const auto random = rank_metrics(candidate_similarity(pred, cands), truth);
  CHECK(std::abs(random.mrr - expected) <= 0.02);

  // Oracle: the prediction is the true candidate.
  FeatureMatrix oracle(episodes, 16);
  for (int i = 0; i < episodes; ++i) oracle.row(i) = cands[static_cast<std::size_t>(i)].row(truth[static_cast<std::size_t>(i)]);
  const auto best = rank_metrics(candidate_similarity(oracle, cands), truth);
  CHECK(best.mrr == 1.0);
  CHECK(best.hit1 == 1.0);
}

TEST_CASE("evaluation never changes the model and is repeatable") {
  const RunConfig cfg = tiny_run("sprite");
  auto res = train(cfg);
  const auto& s = res.state;
  const auto h_online = parameter_hash(s.online_parameters());
  const auto h_target = parameter_hash(s.target_parameters());
  const auto h_buf = parameter_hash(s.buffers());
  const auto opts = small_eval();

  const World world(cfg.world);
  const auto eps = sample_episodes(world, 77, 0, 30, 3);
  ExtractOptions agg;
  agg.M_val = 3;
  const auto a1 = extract_representations(s, eps, agg);
  const auto a2 = extract_representations(s, eps, agg);
  CHECK(a1.rows() == 30);
  CHECK(a1 == a2);
  agg.M_val = 1;
  ExtractOptions enc;
  enc.which = Representation::encoder;
  CHECK(extract_representations(s, eps, agg) != extract_representations(s, eps, enc));
  agg.M_val = 5;
  CHECK_THROWS_AS(extract_representations(s, eps, agg), SequenceError);

  const auto top1 = class_probe(s, cfg, Representation::aggregate, 2, opts);
  CHECK(top1.value >= 0.0);
  CHECK(top1.value <= 1.0);
  CHECK(top1.target == "class_on_agg");
  CHECK(top1.M_val == 2);
  CHECK(top1.config_hash == hex64(cfg.hash()));
  const auto r2 = action_regression(s, cfg, ActionKind::rotation_quat, opts);
  CHECK(r2.value <= 1.0);
  const auto ret = retrieval_records(s, cfg, 2, 20, opts);
  REQUIRE(ret.size() == 3);
  CHECK(ret[0].value > 0.0);
  CHECK(ret[0].value <= 1.0);
  CHECK(ret[2].value >= ret[1].value);
  CHECK_THROWS_AS(retrieval_metrics(s, world, eps, 2, 5, 1), ConfigError);
  CHECK_THROWS_AS(path_integration(s, eps, eps, 2, ActionKind::saccade, Ablation::none), CodecError);

  CHECK(parameter_hash(s.online_parameters()) == h_online);
  CHECK(parameter_hash(s.target_parameters()) == h_target);
  CHECK(parameter_hash(s.buffers()) == h_buf);

  // Same checkpoint, same seeds: same values.
  CHECK(class_probe(s, cfg, Representation::aggregate, 2, opts).value == top1.value);
}

TEST_CASE("retrieval candidates contain the true view at the recorded column") {
  const RunConfig cfg = tiny_run("sprite");
  const ModelState<float> s(cfg.model);
  const World world(cfg.world);
  const auto eps = sample_episodes(world, 78, 0, 40, 2);
  const auto r = retrieval_metrics(s, world, eps, 2, 8, 3);
  CHECK(r.similarity.rows() == 40);
  CHECK(r.similarity.cols() == 8);
  // The true column is not always the same.
  std::set<int> cols(r.true_index.begin(), r.true_index.end());
  CHECK(cols.size() > 1);
  CHECK(rank_metrics(r.similarity, r.true_index).mrr == r.mrr);
}

TEST_CASE("path integration on the saccade world at M=1 is near identity") {
  const RunConfig cfg = tiny_run("saccade", 2);
  const ModelState<float> s(cfg.model);
  EvalOptions opts;
  opts.train_episodes = 400;
  opts.test_episodes = 200;
  const auto full = path_integration_record(s, cfg, ActionKind::saccade, 1, Ablation::none, opts);
  CHECK(full.metric == "path_r2");
  CHECK(full.value >= 0.95);
  const auto blind = path_integration_record(s, cfg, ActionKind::saccade, 1, Ablation::actions, opts);
  CHECK(blind.value <= 0.1);
  CHECK(blind.ablation == "actions");
  const auto vision = path_integration_record(s, cfg, ActionKind::saccade, 1, Ablation::vision, opts);
  CHECK(vision.value >= blind.value);
}

TEST_CASE("matrix arity, determinism and CSV grid") {
  MatrixSpec spec;
  spec.base = tiny_run("sprite", 3);
  spec.m_tr = {1, 2};
  spec.m_val = {1, 3};
  spec.eval = small_eval();
  const auto recs = run_matrix(spec);
  CHECK(recs.size() == 4);
  const auto again = run_matrix(spec);
  REQUIRE(again.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(to_json(again[i]) == to_json(recs[i]));

  const auto csv = matrix_csv(recs, "top1");
  CHECK(csv.rfind("M_tr\\M_val,1,3\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  spec.metrics = {"bogus"};
  CHECK_THROWS_AS(run_matrix(spec), ConfigError);
  CHECK(parse_conditioning("no_predictor_cond").transformer);
  CHECK_FALSE(parse_conditioning("no_predictor_cond").predictor);
  CHECK(ablation_name(parse_conditioning("no_conditioning")) == "no_conditioning");
  CHECK_THROWS_AS(parse_conditioning("sometimes"), ConfigError);
}

TEST_CASE("metric records round-trip through JSON") {
  MetricRecord r;
  r.metric = "mrr";
  r.value = 0.1234567890123;
  r.target = "retrieval";
  r.config_hash = "00ff";
  r.M_tr = 3;
  r.M_val = 5;
  r.ablation = "no_predictor_cond";
  r.d_a = 8;
  r.seed = 18446744073709551615ULL;
  const auto back = metric_from_json(to_json(r));
  CHECK(to_json(back) == to_json(r));
  CHECK(back.seed == r.seed);
  CHECK_THROWS_AS(metric_from_json("{\"value\": 1}"), FormatError);
  CHECK_THROWS_AS(metric_from_json("not json"), FormatError);
}

TEST_CASE("embedding export writes a raw grid and a label file") {
  const auto dir = fs::temp_directory_path() / "seqjepa_test_eval_export";
  fs::create_directories(dir);
  const FeatureMatrix f = gaussian(4, 3, 40);
  export_embeddings(f, {0, 1, 1, 2}, (dir / "emb.grid").string(), (dir / "labels.txt").string());
  const RawGrid g = read_grid((dir / "emb.grid").string());
  CHECK(g.rows == 4);
  CHECK(g.cols == 3);
  CHECK(g.values[5] == static_cast<float>(f(1, 2)));
  std::ifstream in(dir / "labels.txt");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(all == "0\n1\n1\n2\n");
  CHECK_THROWS_AS(export_embeddings(f, {0}, (dir / "x").string(), (dir / "y").string()), ShapeError);
  fs::remove_all(dir);
}
