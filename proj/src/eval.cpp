// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "seqjepa/errors.hpp"
#include "seqjepa/saliency.hpp"

namespace seqjepa {

using ad::Index;
using FloatMatrix = ad::Matrix<float>;

std::string_view to_string(ProbeHead h) { return h == ProbeHead::linear ? "linear" : "mlp_1024"; }

ProbeHead head_for(ActionKind kind) {
  switch (kind) {
    case ActionKind::rotation_quat:
    case ActionKind::jitter_params:
    case ActionKind::crop_params:
      return ProbeHead::mlp_1024;
    default:
      return ProbeHead::linear;
  }
}

std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::actions: return "actions";
    case Ablation::vision: return "vision";
  }
  return "none";
}

Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "actions") return Ablation::actions;
  if (s == "vision") return Ablation::vision;
  throw ConfigError("ablate: expected none, actions or vision, got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Episodes and features

std::vector<Episode> sample_episodes(const World& world, std::uint64_t seed, std::uint64_t first_stream, int count,
                                     int M, int max_retries) {
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(sample_with_retry(world, seed, first_stream + static_cast<std::uint64_t>(i), M, max_retries));
  }
  return out;
}

namespace {

/// Context views [0, m) and actions [0, m) of episodes [begin, end); actions
/// past the episode's end are zero (they only ever fill unused slots).
void context_rows(const std::vector<Episode>& eps, std::size_t begin, std::size_t end, int m, FloatMatrix& views,
                  FloatMatrix& actions) {
  std::vector<const Image*> ptrs;
  const int width = tuple_width(eps.front().kinds);
  actions = FloatMatrix::Zero(static_cast<Index>((end - begin) * static_cast<std::size_t>(m)), width);
  for (std::size_t e = begin; e < end; ++e) {
    const Episode& ep = eps[e];
    if (static_cast<int>(ep.views.size()) < m) {
      throw SequenceError("episode has " + std::to_string(ep.views.size()) + " views, need " + std::to_string(m));
    }
    for (int i = 0; i < m; ++i) {
      ptrs.push_back(&ep.views[static_cast<std::size_t>(i)]);
      if (i < ep.length()) {
        const auto flat = flatten(ep.actions[static_cast<std::size_t>(i)]);
        for (int j = 0; j < width; ++j) {
          actions(static_cast<Index>(e - begin) * m + i, j) = static_cast<float>(flat[static_cast<std::size_t>(j)]);
        }
      }
    }
  }
  views = views_to_rows(ptrs);
}

FloatMatrix view_rows(const std::vector<Episode>& eps, std::size_t begin, std::size_t end, int index) {
  std::vector<const Image*> ptrs;
  for (std::size_t e = begin; e < end; ++e) {
    if (index >= static_cast<int>(eps[e].views.size())) throw SequenceError("episode too short for requested view");
    ptrs.push_back(&eps[e].views[static_cast<std::size_t>(index)]);
  }
  return views_to_rows(ptrs);
}

template <typename F>
void for_chunks(std::size_t n, int chunk, F&& f) {
  const auto step = static_cast<std::size_t>(std::max(chunk, 1));
  for (std::size_t b = 0; b < n; b += step) f(b, std::min(n, b + step));
}

}  // namespace

FeatureMatrix extract_representations(const ModelState<float>& state, const std::vector<Episode>& episodes,
                                      const ExtractOptions& opts) {
  if (opts.M_val < 1) throw ConfigError("M_val must be at least 1");
  const Index d = state.config().d_z;
  FeatureMatrix out(static_cast<Index>(episodes.size()), d);
  if (episodes.empty()) return out;
  for_chunks(episodes.size(), opts.chunk, [&](std::size_t b, std::size_t e) {
    FloatMatrix block;
    if (opts.which == Representation::encoder) {
      block = state.encode_views(view_rows(episodes, b, e, 0)).value();
    } else {
      FloatMatrix views, actions;
      context_rows(episodes, b, e, opts.M_val, views, actions);
      Conditioning cond;
      cond.transformer = !opts.zero_actions;
      block = state.aggregate_representation(views, actions, static_cast<Index>(e - b), opts.M_val, cond,
                                             opts.zero_views);
    }
    out.middleRows(static_cast<Index>(b), static_cast<Index>(e - b)) = block.cast<double>();
  });
  return out;
}

std::vector<int> class_labels(const std::vector<Episode>& episodes) {
  std::vector<int> out;
  out.reserve(episodes.size());
  for (const auto& ep : episodes) out.push_back(ep.class_id);
  return out;
}

// ---------------------------------------------------------------------------
// Probes

namespace {

struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd inv_std;

  static Standardizer fit(const FeatureMatrix& x) {
    Standardizer s;
    s.mean = x.colwise().mean();
    const Eigen::RowVectorXd var = (x.rowwise() - s.mean).array().square().colwise().mean();
    s.inv_std = var.unaryExpr([](double v) { return v > 1e-24 ? 1.0 / std::sqrt(v) : 1.0; });
    return s;
  }
  FloatMatrix apply(const FeatureMatrix& x) const {
    return ((x.rowwise() - mean).array().rowwise() * inv_std.array()).matrix().cast<float>();
  }
  FeatureMatrix invert(const FloatMatrix& y) const {
    return (y.cast<double>().array().rowwise() / inv_std.array()).matrix().rowwise() + mean;
  }
};

/// Probe head: either a single linear map or the 1024-wide MLP.
class Head {
 public:
  Head(ProbeHead kind, Index in, Index out, int hidden, Rng& rng) : kind_(kind) {
    if (kind == ProbeHead::linear) {
      linear_ = Linear<float>(in, out, true, rng);
      linear_.collect("head", params_);
    } else {
      mlp_ = Mlp<float>(in, hidden, out, rng);
      mlp_.collect("head", params_);
    }
  }
  ad::Var<float> forward(const FloatMatrix& x) const {
    const auto v = ad::Var<float>::constant(x);
    return kind_ == ProbeHead::linear ? linear_.forward(v) : mlp_.forward(v);
  }
  FloatMatrix predict(const FloatMatrix& x) const {
    FloatMatrix out;
    for_chunks(static_cast<std::size_t>(x.rows()), 1024, [&](std::size_t b, std::size_t e) {
      const FloatMatrix part = forward(x.middleRows(static_cast<Index>(b), static_cast<Index>(e - b))).value();
      if (out.size() == 0) out.resize(x.rows(), part.cols());
      out.middleRows(static_cast<Index>(b), static_cast<Index>(e - b)) = part;
    });
    return out;
  }
  const ParameterList<float>& params() const { return params_; }

 private:
  ProbeHead kind_;
  Linear<float> linear_;
  Mlp<float> mlp_;
  ParameterList<float> params_;
};

/// Mini-batch Adam over `epochs` passes; `loss_fn(head, rows)` builds the
/// batch loss.
template <typename LossFn>
void fit_head(Head& head, Index n, const ProbeOptions& opts, ProbeHead kind, Rng& rng, LossFn&& loss_fn) {
  const int epochs = opts.epochs_for(kind);
  const double lr = opts.lr_for(kind);
  AdamW::Options ao;
  ao.weight_decay = opts.weight_decay;
  AdamW adam(head.params(), ao);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const auto bs = static_cast<std::size_t>(std::max(opts.batch_size, 1));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(b),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + bs)));
      zero_grads(head.params());
      ad::backward(loss_fn(head, rows));
      adam.step(head.params(), lr);
    }
  }
}

FloatMatrix take_rows(const FloatMatrix& m, const std::vector<Index>& rows) {
  FloatMatrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace

double linear_probe(const FeatureMatrix& train_x, const std::vector<int>& train_y, const FeatureMatrix& test_x,
                    const std::vector<int>& test_y, const ProbeOptions& opts) {
  if (train_x.rows() != static_cast<Index>(train_y.size()) || test_x.rows() != static_cast<Index>(test_y.size())) {
    throw ShapeError("linear_probe: feature and label counts differ");
  }
  if (train_x.cols() != test_x.cols()) throw ShapeError("linear_probe: train and test widths differ");
  if (test_y.empty()) throw ConfigError("linear_probe: empty test set");
  const std::set<int> classes(train_y.begin(), train_y.end());
  if (classes.size() < 2) throw ConfigError("linear_probe: need at least two classes, got " + std::to_string(classes.size()));
  if (*classes.begin() < 0) throw ConfigError("linear_probe: labels must be non-negative");
  const int num_classes = std::max(*classes.rbegin(), *std::max_element(test_y.begin(), test_y.end())) + 1;

  const Standardizer st = Standardizer::fit(train_x);
  const FloatMatrix xtr = st.apply(train_x);
  const FloatMatrix xte = st.apply(test_x);
  Rng rng(opts.seed);
  Head head(ProbeHead::linear, xtr.cols(), num_classes, opts.hidden, rng);
  fit_head(head, xtr.rows(), opts, ProbeHead::linear, rng,
           [&](const Head& h, const std::vector<Index>& rows) {
             std::vector<int> labels;
             labels.reserve(rows.size());
             for (Index r : rows) labels.push_back(train_y[static_cast<std::size_t>(r)]);
             return ad::softmax_cross_entropy(h.forward(take_rows(xtr, rows)), std::span<const int>(labels));
           });
  const FloatMatrix logits = head.predict(xte);
  std::size_t correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    if (static_cast<int>(arg) == test_y[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_y.size());
}

R2Result r2_score(const FeatureMatrix& predictions, const FeatureMatrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw ShapeError("r2_score: prediction and target shapes differ");
  }
  if (targets.rows() == 0) throw ConfigError("r2_score: no rows");
  R2Result out;
  double sum = 0;
  int kept = 0;
  for (Index c = 0; c < targets.cols(); ++c) {
    const double mean = targets.col(c).mean();
    const double ss_tot = (targets.col(c).array() - mean).square().sum();
    const double scale = std::max(1.0, targets.col(c).squaredNorm());
    if (ss_tot <= 1e-24 * scale) {
      out.per_component.push_back(std::numeric_limits<double>::quiet_NaN());
      out.excluded.push_back(static_cast<int>(c));
      continue;
    }
    const double ss_res = (targets.col(c) - predictions.col(c)).squaredNorm();
    out.per_component.push_back(1.0 - ss_res / ss_tot);
    sum += out.per_component.back();
    ++kept;
  }
  if (kept == 0) throw ConfigError("r2_score: every target component has zero variance");
  out.r2 = sum / kept;
  return out;
}

R2Result regression_r2(const FeatureMatrix& train_x, const FeatureMatrix& train_y, const FeatureMatrix& test_x,
                       const FeatureMatrix& test_y, ProbeHead head_kind, const ProbeOptions& opts) {
  if (train_x.rows() != train_y.rows() || test_x.rows() != test_y.rows()) {
    throw ShapeError("regression_r2: feature and target counts differ");
  }
  if (train_x.cols() != test_x.cols() || train_y.cols() != test_y.cols()) {
    throw ShapeError("regression_r2: train and test widths differ");
  }
  if (train_x.rows() == 0) throw ConfigError("regression_r2: empty training set");
  const Standardizer sx = Standardizer::fit(train_x);
  const Standardizer sy = Standardizer::fit(train_y);
  const FloatMatrix xtr = sx.apply(train_x);
  const FloatMatrix ytr = sy.apply(train_y);
  Rng rng(opts.seed);
  Head head(head_kind, xtr.cols(), ytr.cols(), opts.hidden, rng);
  fit_head(head, xtr.rows(), opts, head_kind, rng, [&](const Head& h, const std::vector<Index>& rows) {
    return ad::mean_squared_error(h.forward(take_rows(xtr, rows)), take_rows(ytr, rows));
  });
  return r2_score(sy.invert(head.predict(sx.apply(test_x))), test_y);
}

FeatureMatrix relative_action_targets(const std::vector<Episode>& episodes, int from, int to, ActionKind kind) {
  FeatureMatrix out(static_cast<Index>(episodes.size()), action_width(kind));
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& lat = episodes[e].latents;
    if (from < 0 || to < 0 || static_cast<std::size_t>(std::max(from, to)) >= lat.size()) {
      throw SequenceError("relative_action_targets: view index past the episode end");
    }
    const Action a = relative_action(lat[static_cast<std::size_t>(from)], lat[static_cast<std::size_t>(to)], kind);
    for (std::size_t j = 0; j < a.values.size(); ++j) out(static_cast<Index>(e), static_cast<Index>(j)) = a.values[j];
  }
  return out;
}

FeatureMatrix pair_features(const ModelState<float>& state, const std::vector<Episode>& episodes) {
  const Index d = state.config().d_z;
  FeatureMatrix out(static_cast<Index>(episodes.size()), 2 * d);
  for_chunks(episodes.size(), 256, [&](std::size_t b, std::size_t e) {
    const auto n = static_cast<Index>(e - b);
    out.block(static_cast<Index>(b), 0, n, d) = state.encode_views(view_rows(episodes, b, e, 0)).value().cast<double>();
    out.block(static_cast<Index>(b), d, n, d) = state.encode_views(view_rows(episodes, b, e, 1)).value().cast<double>();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval

RetrievalResult rank_metrics(Eigen::MatrixXd similarity, std::vector<int> true_index) {
  if (similarity.rows() != static_cast<Index>(true_index.size())) {
    throw ShapeError("rank_metrics: one true index per row required");
  }
  RetrievalResult r;
  const Index n = similarity.rows();
  for (Index i = 0; i < n; ++i) {
    const int t = true_index[static_cast<std::size_t>(i)];
    if (t < 0 || t >= similarity.cols()) throw ShapeError("rank_metrics: true index out of range");
    const double s = similarity(i, t);
    int rank = 1;
    for (Index j = 0; j < similarity.cols(); ++j) {
      if (similarity(i, j) > s || (similarity(i, j) == s && j < t)) ++rank;
    }
    r.ranks.push_back(rank);
    r.mrr += 1.0 / rank;
    r.hit1 += rank <= 1 ? 1 : 0;
    r.hit5 += rank <= 5 ? 1 : 0;
  }
  if (n > 0) {
    r.mrr /= static_cast<double>(n);
    r.hit1 /= static_cast<double>(n);
    r.hit5 /= static_cast<double>(n);
  }
  r.similarity = std::move(similarity);
  r.true_index = std::move(true_index);
  return r;
}

Eigen::MatrixXd candidate_similarity(const FeatureMatrix& predictions, const std::vector<FeatureMatrix>& candidates) {
  if (predictions.rows() != static_cast<Index>(candidates.size())) {
    throw ShapeError("candidate_similarity: one candidate set per prediction required");
  }
  if (candidates.empty()) return {};
  const Index k = candidates.front().rows();
  Eigen::MatrixXd sim(predictions.rows(), k);
  for (Index i = 0; i < predictions.rows(); ++i) {
    const auto& c = candidates[static_cast<std::size_t>(i)];
    if (c.rows() != k || c.cols() != predictions.cols()) throw ShapeError("candidate_similarity: ragged candidates");
    const double pn = predictions.row(i).norm();
    for (Index j = 0; j < k; ++j) {
      const double denom = pn * c.row(j).norm();
      sim(i, j) = denom > 0 ? predictions.row(i).dot(c.row(j)) / denom : 0.0;
    }
  }
  return sim;
}

RetrievalResult retrieval_metrics(const ModelState<float>& state, const World& world,
                                  const std::vector<Episode>& episodes, int M, int n_candidates, std::uint64_t seed) {
  if (n_candidates < 6) throw ConfigError("n_candidates must be at least 6");
  if (M < 1) throw ConfigError("retrieval needs at least one context view");
  FeatureMatrix predictions(static_cast<Index>(episodes.size()), state.config().d_z);
  std::vector<FeatureMatrix> candidates;
  std::vector<int> true_index;
  for_chunks(episodes.size(), 128, [&](std::size_t b, std::size_t e) {
    FloatMatrix views, actions;
    context_rows(episodes, b, e, M, views, actions);
    for (std::size_t i = b; i < e; ++i) {
      if (episodes[i].length() < M) throw SequenceError("retrieval: episode needs M actions");
    }
    predictions.middleRows(static_cast<Index>(b), static_cast<Index>(e - b)) =
        state.predict_from_context(views, actions, static_cast<Index>(e - b), M).cast<double>();
    for (std::size_t i = b; i < e; ++i) {
      const Episode& ep = episodes[i];
      Rng rng = stream_rng(seed, ep.source_id, 4 * static_cast<std::uint64_t>(ep.attempt) + 3);
      const int t = std::uniform_int_distribution<int>(0, n_candidates - 1)(rng);
      std::vector<Image> pool = world.distractors(ep, seed, n_candidates - 1);
      pool.insert(pool.begin() + t, ep.views[static_cast<std::size_t>(M)]);
      std::vector<const Image*> ptrs;
      for (const auto& img : pool) ptrs.push_back(&img);
      candidates.push_back(state.target_encode(views_to_rows(ptrs)).cast<double>());
      true_index.push_back(t);
    }
  });
  return rank_metrics(candidate_similarity(predictions, candidates), std::move(true_index));
}

// ---------------------------------------------------------------------------
// Path integration

FeatureMatrix path_features(const ModelState<float>& state, const std::vector<Episode>& episodes, int M,
                            Ablation ablate) {
  if (M < 1) throw ConfigError("path integration needs M >= 1");
  const Index dz = state.config().d_z;
  const Index da = state.config().d_a;
  FeatureMatrix out(static_cast<Index>(episodes.size()), dz + da);
  for_chunks(episodes.size(), 256, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      if (episodes[i].length() < M) throw SequenceError("path integration: episode needs M actions");
    }
    FloatMatrix views, actions;
    context_rows(episodes, b, e, M, views, actions);
    const auto n = static_cast<Index>(e - b);
    Conditioning cond;
    cond.transformer = ablate != Ablation::actions;
    out.block(static_cast<Index>(b), 0, n, dz) =
        state.aggregate_representation(views, actions, n, M, cond, ablate == Ablation::vision).cast<double>();
    if (ablate == Ablation::actions) {
      out.block(static_cast<Index>(b), dz, n, da).setZero();
    } else {
      FloatMatrix last(n, actions.cols());
      for (Index r = 0; r < n; ++r) last.row(r) = actions.row(r * M + M - 1);
      out.block(static_cast<Index>(b), dz, n, da) = state.embed_action(last).value().cast<double>();
    }
  });
  return out;
}

R2Result path_integration(const ModelState<float>& state, const std::vector<Episode>& train,
                          const std::vector<Episode>& test, int M, ActionKind kind, Ablation ablate,
                          const ProbeOptions& opts) {
  for (const auto* set : {&train, &test}) {
    for (const auto& ep : *set) {
      if (std::find(ep.kinds.begin(), ep.kinds.end(), kind) == ep.kinds.end()) {
        throw CodecError("path integration: action kind " + std::string(to_string(kind)) + " is not in the world");
      }
    }
  }
  return regression_r2(path_features(state, train, M, ablate), relative_action_targets(train, 0, M, kind),
                       path_features(state, test, M, ablate), relative_action_targets(test, 0, M, kind),
                       head_for(kind), opts);
}

// ---------------------------------------------------------------------------
// Records

std::string to_json(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["metric"] = r.metric;
  j["value"] = r.value;
  j["target"] = r.target;
  j["config_hash"] = r.config_hash;
  j["M_tr"] = r.M_tr;
  j["M_val"] = r.M_val;
  j["ablation"] = r.ablation;
  j["d_a"] = r.d_a;
  j["seed"] = r.seed;
  return j.dump();
}

MetricRecord metric_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    MetricRecord r;
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.target = j.value("target", std::string());
    r.config_hash = j.value("config_hash", std::string());
    r.M_tr = j.value("M_tr", 0);
    r.M_val = j.value("M_val", 0);
    r.ablation = j.value("ablation", std::string("none"));
    r.d_a = j.value("d_a", 0);
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metric record: ") + e.what());
  }
}

std::uint64_t eval_seed(std::uint64_t train_seed, int which) {
  // splitmix64 finalizer over a domain-separated input.
  std::uint64_t z = train_seed ^ (0xe7a1c0de00000000ULL + static_cast<std::uint64_t>(which));
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

MetricRecord base_record(const RunConfig& cfg, const std::string& metric, const std::string& target, int M_val) {
  MetricRecord r;
  r.metric = metric;
  r.target = target;
  r.config_hash = hex64(cfg.hash());
  r.M_tr = cfg.train.M_tr;
  r.M_val = M_val;
  r.ablation = ablation_name(cfg.train.conditioning);
  r.d_a = cfg.model.d_a;
  r.seed = cfg.train.seed;
  return r;
}

ProbeOptions probe_options(const EvalOptions& opts, const RunConfig& cfg) {
  ProbeOptions p = opts.probe;
  if (p.seed == 0) p.seed = eval_seed(cfg.train.seed, 0);
  return p;
}

}  // namespace

MetricRecord class_probe(const ModelState<float>& state, const RunConfig& cfg, Representation which, int M_val,
                         const EvalOptions& opts) {
  const World world(cfg.world);
  const int m = std::max(M_val, 1);
  const auto train = sample_episodes(world, eval_seed(cfg.train.seed, 1), 0, opts.train_episodes, m);
  const auto test = sample_episodes(world, eval_seed(cfg.train.seed, 2), 0, opts.test_episodes, m);
  ExtractOptions eo;
  eo.which = which;
  eo.M_val = M_val;
  MetricRecord r = base_record(cfg, "top1", which == Representation::aggregate ? "class_on_agg" : "class_on_encoder",
                               which == Representation::aggregate ? M_val : 1);
  r.value = linear_probe(extract_representations(state, train, eo), class_labels(train),
                         extract_representations(state, test, eo), class_labels(test), probe_options(opts, cfg));
  return r;
}

MetricRecord action_regression(const ModelState<float>& state, const RunConfig& cfg, ActionKind kind,
                               const EvalOptions& opts) {
  const World world(cfg.world);
  const auto train = sample_episodes(world, eval_seed(cfg.train.seed, 3), 0, opts.regression_train_episodes, 1);
  const auto test = sample_episodes(world, eval_seed(cfg.train.seed, 4), 0, opts.test_episodes, 1);
  MetricRecord r = base_record(cfg, "r2", "action_regression(" + std::string(to_string(kind)) + ")", 2);
  r.value = regression_r2(pair_features(state, train), relative_action_targets(train, 0, 1, kind),
                          pair_features(state, test), relative_action_targets(test, 0, 1, kind), head_for(kind),
                          probe_options(opts, cfg))
                .r2;
  return r;
}

MetricRecord path_integration_record(const ModelState<float>& state, const RunConfig& cfg, ActionKind kind, int M,
                                     Ablation ablate, const EvalOptions& opts) {
  const World world(cfg.world);
  const auto train = sample_episodes(world, eval_seed(cfg.train.seed, 5), 0, opts.train_episodes, M);
  const auto test = sample_episodes(world, eval_seed(cfg.train.seed, 6), 0, opts.test_episodes, M);
  MetricRecord r = base_record(cfg, "path_r2", "path_integration(" + std::string(to_string(kind)) + ")", M);
  r.ablation = std::string(to_string(ablate));
  r.value = path_integration(state, train, test, M, kind, ablate, probe_options(opts, cfg)).r2;
  return r;
}

std::vector<MetricRecord> retrieval_records(const ModelState<float>& state, const RunConfig& cfg, int M_val,
                                            int n_candidates, const EvalOptions& opts) {
  const World world(cfg.world);
  const auto test = sample_episodes(world, eval_seed(cfg.train.seed, 7), 0, opts.test_episodes, M_val);
  const RetrievalResult res = retrieval_metrics(state, world, test, M_val, n_candidates, eval_seed(cfg.train.seed, 8));
  std::vector<MetricRecord> out;
  for (auto [name, value] : {std::pair{"mrr", res.mrr}, {"hit1", res.hit1}, {"hit5", res.hit5}}) {
    MetricRecord r = base_record(cfg, name, "retrieval", M_val);
    r.value = value;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix

std::string ablation_name(Conditioning c) {
  if (c.transformer && c.predictor) return "none";
  if (!c.transformer && !c.predictor) return "no_conditioning";
  return c.transformer ? "no_predictor_cond" : "no_transformer_cond";
}

Conditioning parse_conditioning(const std::string& s) {
  if (s == "none" || s == "conditioned") return {true, true};
  if (s == "no_transformer_cond") return {false, true};
  if (s == "no_predictor_cond") return {true, false};
  if (s == "no_conditioning") return {false, false};
  throw ConfigError("ablation: expected none, no_transformer_cond, no_predictor_cond or no_conditioning, got '" + s +
                    "'");
}

std::vector<MetricRecord> run_matrix(const MatrixSpec& spec, const LoadedModel* reuse,
                                     const std::function<void(const MetricRecord&)>& on_record) {
  if (spec.m_tr.empty() || spec.m_val.empty()) throw ConfigError("matrix: M_tr and M_val lists must be non-empty");
  for (const auto& m : spec.metrics) {
    if (m != "top1" && m != "r2") throw ConfigError("matrix: unknown metric '" + m + "'");
  }
  const std::vector<int> d_as = spec.d_a.empty() ? std::vector<int>{spec.base.model.d_a} : spec.d_a;
  const std::vector<std::uint64_t> seeds =
      spec.seeds.empty() ? std::vector<std::uint64_t>{spec.base.train.seed} : spec.seeds;
  std::vector<MetricRecord> out;
  auto emit = [&](MetricRecord r) {
    if (on_record) on_record(r);
    out.push_back(std::move(r));
  };
  for (std::uint64_t seed : seeds) {
    for (int d_a : d_as) {
      for (const Conditioning& cond : spec.ablations) {
        for (int m_tr : spec.m_tr) {
          RunConfig cfg = spec.base;
          cfg.train.seed = seed;
          cfg.model.init_seed = seed;
          cfg.model.d_a = d_a;
          cfg.train.conditioning = cond;
          cfg.train.M_tr = m_tr;
          cfg.finalize();
          const bool reusable = reuse && reuse->config.hash() == cfg.hash();
          const ModelState<float> state = reusable ? reuse->state : train(cfg).state;
          for (const auto& metric : spec.metrics) {
            if (metric == "r2") {
              emit(action_regression(state, cfg, World(cfg.world).kinds().front(), spec.eval));
              continue;
            }
            for (int m_val : spec.m_val) emit(class_probe(state, cfg, Representation::aggregate, m_val, spec.eval));
          }
        }
      }
    }
  }
  return out;
}

std::string matrix_csv(const std::vector<MetricRecord>& records, const std::string& metric) {
  std::set<int> rows, cols;
  std::map<std::pair<int, int>, std::pair<double, int>> cells;
  for (const auto& r : records) {
    if (r.metric != metric) continue;
    rows.insert(r.M_tr);
    cols.insert(r.M_val);
    auto& c = cells[{r.M_tr, r.M_val}];
    c.first += r.value;
    c.second += 1;
  }
  std::ostringstream os;
  os << "M_tr\\M_val";
  for (int c : cols) os << "," << c;
  os << "\n";
  char buf[32];
  for (int r : rows) {
    os << r;
    for (int c : cols) {
      os << ",";
      const auto it = cells.find({r, c});
      if (it != cells.end()) {
        std::snprintf(buf, sizeof buf, "%.6f", it->second.first / it->second.second);
        os << buf;
      }
    }
    os << "\n";
  }
  return os.str();
}

void export_embeddings(const FeatureMatrix& features, const std::vector<int>& labels, const std::string& grid_path,
                       const std::string& labels_path) {
  if (features.rows() != static_cast<Index>(labels.size())) {
    throw ShapeError("export_embeddings: one label per row required");
  }
  RawGrid grid;
  grid.rows = static_cast<std::uint64_t>(features.rows());
  grid.cols = static_cast<std::uint64_t>(features.cols());
  grid.values.reserve(static_cast<std::size_t>(features.size()));
  for (Index r = 0; r < features.rows(); ++r) {
    for (Index c = 0; c < features.cols(); ++c) grid.values.push_back(static_cast<float>(features(r, c)));
  }
  write_grid(grid, grid_path);
  std::ofstream out(labels_path);
  if (!out) throw Error("cannot write '" + labels_path + "'");
  for (int l : labels) out << l << "\n";
}

}  // namespace seqjepa
