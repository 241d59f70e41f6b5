// SPDX-License-Identifier: Apache-2.0
//
// seqjepa: train, eval, sample, chart, export-embeddings.
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort,
// 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "seqjepa/chart.hpp"
#include "seqjepa/errors.hpp"
#include "seqjepa/eval.hpp"
#include "seqjepa/manifest.hpp"
#include "seqjepa/training.hpp"

namespace fs = std::filesystem;
using namespace seqjepa;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
}

std::vector<int> parse_ints(const std::string& list, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(what + ": expected comma-separated integers, got '" + list + "'");
    }
  }
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

std::vector<std::string> split(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Preset, then config file, then --set overrides in order.
RunConfig assemble_config(const std::string& preset, const std::string& config_path,
                          const std::vector<std::string>& overrides) {
  KeyValueConfig kv = preset_config(preset);
  if (!config_path.empty()) {
    const KeyValueConfig file = KeyValueConfig::load(config_path);
    for (const auto& [k, v] : file.values()) kv.set(k, v);
  }
  for (const auto& o : overrides) kv.apply_override(o);
  return RunConfig::from_kv(kv);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  std::string out;
  std::string resume;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  if (!a.resume.empty()) {
    Trainer t = Trainer::from_checkpoint(a.resume);
    if (!a.config.empty() || !a.overrides.empty()) throw ConfigError("--resume takes its config from the checkpoint");
    const std::string dir = a.out.empty() ? fs::path(a.resume).parent_path().string() : a.out;
    const auto s = train_to_directory(t, dir);
    std::cout << "resumed to step " << s.steps << ", final loss " << s.final_loss << ", checkpoint " << s.checkpoint
              << "\n";
    return 0;
  }
  if (a.config.empty() && a.preset == "desk" && a.overrides.empty()) {
    throw ConfigError("train needs --config, --preset or --set");
  }
  const RunConfig cfg = assemble_config(a.preset, a.config, a.overrides);
  const std::string hash = hex64(cfg.hash());
  const std::string dir = resolve_out_path(a.out, "run-" + hash + "-s" + std::to_string(cfg.train.seed));
  prepare_out_dir(dir, a.force);

  RunManifest m;
  m.config_text = cfg.text();
  m.config_hash = hash;
  m.seed = cfg.train.seed;
  m.world = std::string(to_string(cfg.world.kind));
  m.overrides = a.overrides;
  m.started_at = utc_timestamp();
  m.out_dir = dir;
  m.metrics_path = (fs::path(dir) / "metrics.jsonl").string();
  m.checkpoint_path = (fs::path(dir) / "final.bin").string();
  write_file((fs::path(dir) / "config.cfg").string(), m.config_text);
  write_file((fs::path(dir) / "run_manifest.json").string(), m.to_json());

  Trainer t(cfg);
  std::cerr << "training " << cfg.train.total_steps << " steps into " << dir << "\n";
  const auto s = train_to_directory(t, dir);
  m.finished_at = utc_timestamp();
  write_file((fs::path(dir) / "run_manifest.json").string(), m.to_json());
  std::cout << "steps " << s.steps << ", final loss " << s.final_loss << ", smoothed " << s.final_smoothed_loss
            << ", config " << s.config_hash << ", checkpoint " << s.checkpoint << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string config;  // optional; must match the checkpoint's config
  std::vector<std::string> overrides;
  std::string probe;
  int M_val = 1;
  std::string kind;
  std::vector<std::string> matrix;
  std::string path_kind;
  std::string M_list = "2";
  std::string ablate = "none";
  bool retrieval = false;
  int n_candidates = 20;
  int train_episodes = 8000;
  int regression_train_episodes = 8000;
  int test_episodes = 1000;
  int epochs = 0;
  std::string out;
  std::string csv;
  bool force = false;
};

ActionKind kind_or_default(const std::string& name, const World& world) {
  if (name.empty()) return world.kinds().front();
  return parse_action_kind(name);
}

int cmd_eval(const EvalArgs& a) {
  const int modes = (a.probe.empty() ? 0 : 1) + (a.matrix.empty() ? 0 : 1) + (a.path_kind.empty() ? 0 : 1) +
                    (a.retrieval ? 1 : 0);
  if (modes != 1) throw ConfigError("eval needs exactly one of --probe, --matrix, --path-integration, --retrieval");
  if (!a.out.empty()) check_out_file(a.out, a.force);
  if (!a.csv.empty()) check_out_file(a.csv, a.force);

  const LoadedModel model = load_model(a.checkpoint);
  const RunConfig& cfg = model.config;
  if (!a.config.empty() || !a.overrides.empty()) {
    const RunConfig expected = assemble_config("desk", a.config, a.overrides);
    if (expected.hash() != cfg.hash()) {
      throw ConfigError("checkpoint config " + hex64(cfg.hash()) + " does not match --config " +
                        hex64(expected.hash()));
    }
  }
  const World world(cfg.world);
  EvalOptions eo;
  eo.train_episodes = a.train_episodes;
  eo.regression_train_episodes = a.regression_train_episodes;
  eo.test_episodes = a.test_episodes;
  eo.probe.epochs = a.epochs;

  std::vector<MetricRecord> records;
  std::ofstream out_file;
  if (!a.out.empty()) out_file.open(a.out, std::ios::trunc);
  auto emit = [&](const MetricRecord& r) {
    const std::string line = to_json(r);
    std::cout << line << "\n" << std::flush;
    if (out_file) out_file << line << "\n" << std::flush;
    records.push_back(r);
  };

  if (!a.probe.empty()) {
    if (a.probe == "class_on_agg") {
      emit(class_probe(model.state, cfg, Representation::aggregate, a.M_val, eo));
    } else if (a.probe == "class_on_encoder") {
      emit(class_probe(model.state, cfg, Representation::encoder, 1, eo));
    } else if (a.probe == "action_regression") {
      emit(action_regression(model.state, cfg, kind_or_default(a.kind, world), eo));
    } else {
      throw ConfigError("--probe: expected class_on_agg, class_on_encoder or action_regression, got '" + a.probe +
                        "'");
    }
  } else if (a.retrieval) {
    for (const auto& r : retrieval_records(model.state, cfg, a.M_val, a.n_candidates, eo)) emit(r);
  } else if (!a.path_kind.empty()) {
    const ActionKind kind = parse_action_kind(a.path_kind);
    const Ablation ablate = parse_ablation(a.ablate);
    for (int M : parse_ints(a.M_list, "--M")) emit(path_integration_record(model.state, cfg, kind, M, ablate, eo));
  } else {
    MatrixSpec spec;
    spec.base = cfg;
    spec.eval = eo;
    spec.m_tr = {cfg.train.M_tr};
    spec.m_val = {a.M_val};
    spec.ablations = {cfg.train.conditioning};
    for (const auto& token : a.matrix) {
      const auto eq = token.find('=');
      if (eq == std::string::npos) throw ConfigError("--matrix: expected key=list, got '" + token + "'");
      const std::string key = token.substr(0, eq);
      const std::string val = token.substr(eq + 1);
      if (key == "mtr") {
        spec.m_tr = parse_ints(val, "mtr");
      } else if (key == "mval") {
        spec.m_val = parse_ints(val, "mval");
      } else if (key == "d_a") {
        spec.d_a = parse_ints(val, "d_a");
      } else if (key == "seeds") {
        spec.seeds.clear();
        for (int s : parse_ints(val, "seeds")) spec.seeds.push_back(static_cast<std::uint64_t>(s));
      } else if (key == "ablations") {
        spec.ablations.clear();
        for (const auto& name : split(val)) spec.ablations.push_back(parse_conditioning(name));
      } else if (key == "metrics") {
        spec.metrics = split(val);
      } else {
        throw ConfigError("--matrix: unknown key '" + key + "' (mtr, mval, d_a, seeds, ablations, metrics)");
      }
    }
    run_matrix(spec, &model, emit);
    std::string grids;
    for (const auto& metric : spec.metrics) {
      if (spec.metrics.size() > 1) grids += "# " + metric + "\n";
      grids += matrix_csv(records, metric);
    }
    if (a.csv.empty()) {
      std::cout << grids;
    } else {
      write_file(a.csv, grids);
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string config;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  int M = 3;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::string out;
  bool force = false;
};

int cmd_sample(const SampleArgs& a) {
  if (a.M < 1) throw ConfigError("--M must be at least 1");
  const RunConfig cfg = assemble_config(a.preset, a.config, a.overrides);
  const World world(cfg.world);
  const std::string dir =
      resolve_out_path(a.out, "sample-" + std::string(to_string(cfg.world.kind)) + "-s" + std::to_string(a.seed) +
                                  "-k" + std::to_string(a.stream));
  prepare_out_dir(dir, a.force);
  const Episode ep = sample_with_retry(world, a.seed, a.stream, a.M, cfg.train.max_retries, true);
  write_episode_dump(ep, dir);
  std::cout << "wrote " << ep.views.size() << " views to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// chart

struct ChartArgs {
  std::vector<std::string> inputs;
  std::vector<std::string> fields;
  std::string out;
  bool force = false;
};

int cmd_chart(const ChartArgs& a) {
  std::vector<JsonlSource> sources;
  for (const auto& path : a.inputs) sources.push_back({fs::path(path).stem().string(), read_file(path)});
  const Chart chart = chart_from_jsonl(sources, a.fields);
  const std::string svg = render_svg(chart);
  const std::string out = resolve_out_path(a.out, "chart.svg");
  check_out_file(out, a.force);
  write_file(out, svg);
  std::cout << "wrote " << chart.series.size() << " series, " << chart.point_count() << " points to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// export-embeddings

struct ExportArgs {
  std::string checkpoint;
  std::string which = "aggregate";
  int M_val = 1;
  int episodes = 1000;
  std::int64_t seed = -1;
  std::string out;
  bool force = false;
};

int cmd_export(const ExportArgs& a) {
  const LoadedModel model = load_model(a.checkpoint);
  ExtractOptions eo;
  if (a.which == "encoder") {
    eo.which = Representation::encoder;
  } else if (a.which == "aggregate") {
    eo.which = Representation::aggregate;
  } else {
    throw ConfigError("--which: expected encoder or aggregate, got '" + a.which + "'");
  }
  if (a.episodes < 1) throw ConfigError("--episodes must be positive");
  eo.M_val = a.M_val;
  const World world(model.config.world);
  const std::uint64_t seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : eval_seed(model.config.train.seed, 9);
  const auto eps = sample_episodes(world, seed, 0, a.episodes, std::max(a.M_val, 1));
  const std::string dir = resolve_out_path(a.out, "embeddings-" + hex64(model.config.hash()));
  prepare_out_dir(dir, a.force);
  const auto grid = (fs::path(dir) / "embeddings.grid").string();
  const auto labels = (fs::path(dir) / "labels.txt").string();
  export_embeddings(extract_representations(model.state, eps, eo), class_labels(eps), grid, labels);
  std::cout << "wrote " << eps.size() << " embeddings to " << grid << " and " << labels << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seqjepa: action-conditioned sequential joint-embedding models on synthetic worlds"};
  app.set_version_flag("--version", kArtifactVersion);
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
  train_cmd->add_option("--config", ta.config, "key = value config file");
  train_cmd->add_option("--preset", ta.preset, "desk, fast or paper (applied before the config file)");
  train_cmd->add_option("--set", ta.overrides, "key=value override, repeatable")->take_all()->allow_extra_args(false);
  train_cmd->add_option("--out", ta.out, "run directory (default $SEQJEPA_OUT/run-<hash>-s<seed>)");
  train_cmd->add_option("--resume", ta.resume, "continue from a checkpoint");
  train_cmd->add_flag("--force", ta.force, "overwrite a non-empty --out");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; records go to stdout as JSONL");
  eval_cmd->add_option("checkpoint", ea.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--config", ea.config, "expected run config; a mismatch is an error");
  eval_cmd->add_option("--set", ea.overrides, "key=value override on --config, repeatable")
      ->take_all()
      ->allow_extra_args(false);
  eval_cmd->add_option("--probe", ea.probe, "class_on_agg, class_on_encoder or action_regression");
  eval_cmd->add_option("--M_val", ea.M_val, "inference sequence length");
  eval_cmd->add_option("--kind", ea.kind, "action kind for action_regression (default: the world's first)");
  eval_cmd->add_option("--matrix", ea.matrix, "grid: mtr=1,3 mval=1,3,5 [ablations=..] [seeds=..] [d_a=..] [metrics=top1,r2]")
      ->expected(1, -1);
  eval_cmd->add_option("--path-integration", ea.path_kind, "action kind to integrate, e.g. saccade");
  eval_cmd->add_option("--M", ea.M_list, "path lengths, comma-separated");
  eval_cmd->add_option("--ablate", ea.ablate, "none, actions or vision");
  eval_cmd->add_flag("--retrieval", ea.retrieval, "MRR, Hit@1 and Hit@5 at --M_val");
  eval_cmd->add_option("--n-candidates", ea.n_candidates, "retrieval candidates per episode");
  eval_cmd->add_option("--train-episodes", ea.train_episodes, "training episodes for class probes and path integration");
  eval_cmd->add_option("--regression-train-episodes", ea.regression_train_episodes,
                       "training pairs for action regression");
  eval_cmd->add_option("--test-episodes", ea.test_episodes, "held-out episodes");
  eval_cmd->add_option("--epochs", ea.epochs, "probe epochs (0: 50 linear, 100 MLP)");
  eval_cmd->add_option("--out", ea.out, "also write records to this JSONL file");
  eval_cmd->add_option("--csv", ea.csv, "matrix grid CSV path");
  eval_cmd->add_flag("--force", ea.force, "overwrite existing output files");

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "dump one episode (views, actions, latents)");
  sample_cmd->add_option("--config", sa.config, "key = value config file");
  sample_cmd->add_option("--preset", sa.preset, "desk, fast or paper");
  sample_cmd->add_option("--set", sa.overrides, "key=value override, repeatable")->take_all()->allow_extra_args(false);
  sample_cmd->add_option("--M", sa.M, "actions per episode");
  sample_cmd->add_option("--seed", sa.seed, "world seed");
  sample_cmd->add_option("--stream", sa.stream, "episode stream id");
  sample_cmd->add_option("--out", sa.out, "dump directory");
  sample_cmd->add_flag("--force", sa.force, "overwrite a non-empty --out");

  ChartArgs ca;
  auto* chart_cmd = app.add_subcommand("chart", "SVG line chart from metrics JSONL");
  chart_cmd->add_option("inputs", ca.inputs, "JSONL files")->required()->check(CLI::ExistingFile);
  chart_cmd->add_option("--field", ca.fields, "training-record fields to plot (default loss), repeatable")
      ->take_all()
      ->allow_extra_args(false);
  chart_cmd->add_option("--out", ca.out, "SVG path (default $SEQJEPA_OUT/chart.svg)");
  chart_cmd->add_flag("--force", ca.force, "overwrite an existing file");

  ExportArgs xa;
  auto* export_cmd = app.add_subcommand("export-embeddings", "write representations and class labels");
  export_cmd->add_option("checkpoint", xa.checkpoint, "checkpoint file")->required();
  export_cmd->add_option("--which", xa.which, "encoder or aggregate");
  export_cmd->add_option("--M_val", xa.M_val, "views per aggregate");
  export_cmd->add_option("--episodes", xa.episodes, "number of episodes");
  export_cmd->add_option("--seed", xa.seed, "episode seed (default derived from the run seed)");
  export_cmd->add_option("--out", xa.out, "output directory");
  export_cmd->add_flag("--force", xa.force, "overwrite a non-empty --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(ea);
    if (*sample_cmd) return cmd_sample(sa);
    if (*chart_cmd) return cmd_chart(ca);
    if (*export_cmd) return cmd_export(xa);
  } catch (const NumericDegeneracyError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CodecError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
