// SPDX-License-Identifier: Apache-2.0
//
// Frozen-representation evaluation: class probes, transformation
// regression, retrieval ranking, path integration and the train/eval
// matrix over sequence lengths and ablations.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "seqjepa/model.hpp"
#include "seqjepa/training.hpp"
#include "seqjepa/worlds.hpp"

namespace seqjepa {

using FeatureMatrix = Eigen::MatrixXd;

enum class ProbeHead { linear, mlp_1024 };
std::string_view to_string(ProbeHead h);
/// Head for regressing an action kind: MLP for rotation, jitter and crop,
/// linear for everything else.
ProbeHead head_for(ActionKind kind);

/// Optimization settings shared by the probe heads.
struct ProbeOptions {
  int epochs = 0;  // 0: 50 for linear heads, 100 for MLP heads
  int batch_size = 256;
  double lr = 0;  // 0: 1e-2 for linear heads (1e-3 leaves them underfit), 1e-3 for MLP heads
  double weight_decay = 0;
  int hidden = 1024;
  std::uint64_t seed = 0;

  int epochs_for(ProbeHead h) const { return epochs > 0 ? epochs : (h == ProbeHead::linear ? 50 : 100); }
  double lr_for(ProbeHead h) const { return lr > 0 ? lr : (h == ProbeHead::linear ? 1e-2 : 1e-3); }
};

// ---------------------------------------------------------------------------
// Episodes and features

/// `count` episodes of M actions from streams [first_stream, first_stream +
/// count) under `seed`, resampled on exhausted saliency.
std::vector<Episode> sample_episodes(const World& world, std::uint64_t seed, std::uint64_t first_stream, int count,
                                     int M, int max_retries = 8);

enum class Representation { encoder, aggregate };

/// Options for aggregate extraction. Ablated paths see zeros.
struct ExtractOptions {
  Representation which = Representation::aggregate;
  int M_val = 1;
  bool zero_actions = false;
  bool zero_views = false;
  int chunk = 256;
};

/// One row per episode: the encoding of view 0, or the aggregate over views
/// [0, M_val) with actions [0, M_val - 1). Never changes the state.
FeatureMatrix extract_representations(const ModelState<float>& state, const std::vector<Episode>& episodes,
                                      const ExtractOptions& opts);

std::vector<int> class_labels(const std::vector<Episode>& episodes);

// ---------------------------------------------------------------------------
// Probes

struct ProbeSplit {
  FeatureMatrix train_x;
  FeatureMatrix test_x;
};

/// Softmax-linear classifier trained with Adam on standardized features;
/// returns held-out top-1 accuracy. Fewer than two classes raises
/// ConfigError.
double linear_probe(const FeatureMatrix& train_x, const std::vector<int>& train_y, const FeatureMatrix& test_x,
                    const std::vector<int>& test_y, const ProbeOptions& opts = {});

struct R2Result {
  double r2 = 0;                   // uniform mean over retained components
  std::vector<double> per_component;  // NaN for excluded components
  std::vector<int> excluded;       // zero-variance components
};

/// 1 - SS_res / SS_tot per column, uniformly averaged over the columns
/// whose targets vary. ConfigError when no column varies.
R2Result r2_score(const FeatureMatrix& predictions, const FeatureMatrix& targets);

/// Trains a regression head on standardized inputs and targets and returns
/// held-out R^2.
R2Result regression_r2(const FeatureMatrix& train_x, const FeatureMatrix& train_y, const FeatureMatrix& test_x,
                       const FeatureMatrix& test_y, ProbeHead head, const ProbeOptions& opts = {});

/// Rows of relative actions between views `from` and `to` of each episode,
/// restricted to `kind`.
FeatureMatrix relative_action_targets(const std::vector<Episode>& episodes, int from, int to, ActionKind kind);

/// [f(x_0) | f(x_1)] per episode: the inputs of transformation regression.
FeatureMatrix pair_features(const ModelState<float>& state, const std::vector<Episode>& episodes);

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalResult {
  double mrr = 0;
  double hit1 = 0;
  double hit5 = 0;
  /// episodes x n_candidates cosine similarities and the column of the true
  /// candidate in each row, kept for brute-force recomputation.
  Eigen::MatrixXd similarity;
  std::vector<int> true_index;
  std::vector<int> ranks;
};

/// Ranks each row's true candidate; ties go to the lower candidate index.
RetrievalResult rank_metrics(Eigen::MatrixXd similarity, std::vector<int> true_index);

/// Cosine similarity of each prediction with its candidates.
Eigen::MatrixXd candidate_similarity(const FeatureMatrix& predictions, const std::vector<FeatureMatrix>& candidates);

/// Predicts the embedding of view M from views [0, M) and the actions, and
/// ranks the target encoding of view M among `n_candidates - 1` same-source
/// distractor views. The true candidate sits at a seeded random column.
RetrievalResult retrieval_metrics(const ModelState<float>& state, const World& world,
                                  const std::vector<Episode>& episodes, int M, int n_candidates, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Path integration

enum class Ablation { none, actions, vision };
std::string_view to_string(Ablation a);
Ablation parse_ablation(const std::string& s);

/// [z_AGG over views [0, M) | e(a_{M-1})] per episode with the requested
/// stream zeroed.
FeatureMatrix path_features(const ModelState<float>& state, const std::vector<Episode>& episodes, int M,
                            Ablation ablate);

/// Regresses the displacement from view 0 to view M (the episode's
/// cumulative action when it has exactly M actions) from path features.
/// Heads are fitted on the ablated features. CodecError when `kind` is not
/// an action of the world.
R2Result path_integration(const ModelState<float>& state, const std::vector<Episode>& train,
                          const std::vector<Episode>& test, int M, ActionKind kind, Ablation ablate,
                          const ProbeOptions& opts = {});

// ---------------------------------------------------------------------------
// Records and the experiment matrix

struct MetricRecord {
  std::string metric;  // top1, r2, mrr, hit1, hit5, path_r2
  double value = 0;
  std::string target;  // e.g. class_on_agg, action_regression(rotation_quat)
  std::string config_hash;
  int M_tr = 0;
  int M_val = 0;
  std::string ablation = "none";
  int d_a = 0;
  std::uint64_t seed = 0;
};

std::string to_json(const MetricRecord& r);
MetricRecord metric_from_json(const std::string& line);

/// Probe sizes for one evaluation. Episodes come from seeds disjoint from
/// the training streams.
struct EvalOptions {
  int train_episodes = 8000;  // class probes and path integration
  int test_episodes = 1000;
  /// Pairs for transformation regression; with 2000 the 1024-wide head
  /// overfits the pair features.
  int regression_train_episodes = 8000;
  ProbeOptions probe;
};

/// Evaluation seeds derived from a training seed.
std::uint64_t eval_seed(std::uint64_t train_seed, int which);

/// Class probe on the aggregate over M_val views (or on the encoder).
MetricRecord class_probe(const ModelState<float>& state, const RunConfig& cfg, Representation which, int M_val,
                         const EvalOptions& opts);
/// Relative transformation regression between two views of an episode.
MetricRecord action_regression(const ModelState<float>& state, const RunConfig& cfg, ActionKind kind,
                               const EvalOptions& opts);
MetricRecord path_integration_record(const ModelState<float>& state, const RunConfig& cfg, ActionKind kind, int M,
                                     Ablation ablate, const EvalOptions& opts);
std::vector<MetricRecord> retrieval_records(const ModelState<float>& state, const RunConfig& cfg, int M_val,
                                            int n_candidates, const EvalOptions& opts);

struct MatrixSpec {
  RunConfig base;
  std::vector<int> m_tr;
  std::vector<int> m_val;
  std::vector<Conditioning> ablations{Conditioning{}};
  std::vector<int> d_a;  // empty: base value only
  std::vector<std::uint64_t> seeds;  // empty: base seed only
  /// Evaluated per cell: "top1" (class_on_agg) and/or "r2" (action
  /// regression of the world's first action kind, once per trained model).
  std::vector<std::string> metrics{"top1"};
  EvalOptions eval;
};

std::string ablation_name(Conditioning c);
Conditioning parse_conditioning(const std::string& s);

/// Trains one model per (M_tr, ablation, d_a, seed) and evaluates it at each
/// M_val. `reuse`, when given, supplies an already trained model for the
/// cell whose config matches it exactly. `on_record` sees records as they
/// are produced.
std::vector<MetricRecord> run_matrix(const MatrixSpec& spec, const LoadedModel* reuse = nullptr,
                                     const std::function<void(const MetricRecord&)>& on_record = {});

/// Grid of one metric: rows M_tr, columns M_val, mean over matching records.
std::string matrix_csv(const std::vector<MetricRecord>& records, const std::string& metric);

/// Writes features as a raw grid and labels one per line.
void export_embeddings(const FeatureMatrix& features, const std::vector<int>& labels, const std::string& grid_path,
                       const std::string& labels_path);

}  // namespace seqjepa
