// SPDX-License-Identifier: Apache-2.0
//
// Charts, run manifests, presets and the command line contract (exit codes,
// output arities, collision policy). The binary path comes from the build.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "seqjepa/chart.hpp"
#include "seqjepa/config.hpp"
#include "seqjepa/errors.hpp"
#include "seqjepa/eval.hpp"
#include "seqjepa/manifest.hpp"
#include "seqjepa/training.hpp"

#ifndef SEQJEPA_CLI_PATH
#error "SEQJEPA_CLI_PATH must name the seqjepa executable"
#endif

namespace fs = std::filesystem;
using namespace seqjepa;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("seqjepa_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with stdout/stderr captured into files under `dir`.
Run cli(const fs::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + SEQJEPA_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::vector<MetricRecord> metric_lines(const std::string& text) {
  std::vector<MetricRecord> out;
  for (const auto& l : lines(text)) {
    if (!l.empty() && l.front() == '{') out.push_back(metric_from_json(l));
  }
  return out;
}

int count(const std::string& text, const std::string& needle) {
  int n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

const char* kTinySprite =
    "version = 1\n"
    "world = sprite\n"
    "resolution = 16\n"
    "d_z = 16\n"
    "d_a = 8\n"
    "encoder_layers = 4,8\n"
    "aggregator_layers = 1\n"
    "aggregator_heads = 2\n"
    "predictor_hidden = 32\n"
    "batch_size = 8\n"
    "M_tr = 2\n"
    "total_steps = 4\n"
    "warmup_steps = 1\n"
    "seed = 5\n";

const char* kTinySaccade =
    "version = 1\n"
    "world = saccade\n"
    "image_size = 48\n"
    "patch_size = 16\n"
    "ior_radius = 8\n"
    "d_z = 16\n"
    "d_a = 8\n"
    "encoder_layers = 4,8\n"
    "aggregator_layers = 1\n"
    "aggregator_heads = 2\n"
    "predictor_hidden = 32\n"
    "batch_size = 8\n"
    "M_tr = 2\n"
    "total_steps = 3\n"
    "warmup_steps = 1\n"
    "seed = 2\n";

// Small probe budgets so eval commands finish in seconds.
const char* kSmallEval = "--train-episodes 64 --test-episodes 32 --regression-train-episodes 64 --epochs 2";

}  // namespace

// ---------------------------------------------------------------------------
// library pieces

TEST_CASE("chart from training records: one point per step") {
  std::string text;
  for (int s = 0; s < 100; ++s) text += "{\"step\":" + std::to_string(s) + ",\"loss\":" + std::to_string(1.0 / (1 + s)) + "}\n";
  const Chart c = chart_from_jsonl({{"run", text}});
  REQUIRE(c.series.size() == 1);
  CHECK(c.point_count() == 100);
  CHECK(c.series[0].points[37].first == 37);
  const std::string svg = render_svg(c);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("data-points=\"100\"") != std::string::npos);
  CHECK(count(svg, "class=\"legend-entry\"") == 1);
  CHECK(svg.find("<script") == std::string::npos);
}

TEST_CASE("chart of metric records groups series and sorts by M_val") {
  std::string text;
  for (int mv : {5, 1, 3}) {
    for (const char* ab : {"none", "actions"}) {
      MetricRecord r;
      r.metric = "top1";
      r.target = "class_on_agg";
      r.M_tr = 3;
      r.M_val = mv;
      r.ablation = ab;
      r.value = 0.1 * mv;
      text += to_json(r) + "\n";
    }
  }
  const Chart c = chart_from_jsonl({{"m", text}});
  REQUIRE(c.series.size() == 2);
  CHECK(c.x_label == "M_val");
  for (const auto& s : c.series) {
    REQUIRE(s.points.size() == 3);
    CHECK(s.points[0].first == 1);
    CHECK(s.points[2].first == 5);
  }
  CHECK(c.series[0].label != c.series[1].label);
}

TEST_CASE("two sources give two labeled lines") {
  const std::string a = "{\"step\":0,\"loss\":0.9}\n{\"step\":1,\"loss\":0.8}\n";
  const std::string b = "{\"step\":0,\"loss\":0.7}\n{\"step\":1,\"loss\":0.6}\n";
  const Chart c = chart_from_jsonl({{"a", a}, {"b", b}});
  REQUIRE(c.series.size() == 2);
  CHECK(c.series[0].label == "a: loss");
  CHECK(c.series[1].label == "b: loss");
  const std::string svg = render_svg(c);
  CHECK(count(svg, "class=\"legend-entry\"") == 2);
  CHECK(count(svg, "<polyline class=\"series\"") == 2);
}

TEST_CASE("chart input errors") {
  CHECK_THROWS_AS(chart_from_jsonl({{"e", ""}}), FormatError);
  CHECK_THROWS_AS(chart_from_jsonl({{"e", "\n  \n"}}), FormatError);
  CHECK_THROWS_AS(chart_from_jsonl({{"bad", "{\"step\":1,\"loss\":0.5}\nnot json\n"}}), FormatError);
  CHECK_THROWS_AS(chart_from_jsonl({{"arr", "[1,2]\n"}}), FormatError);
  CHECK_THROWS_AS(chart_from_jsonl({{"f", "{\"step\":1,\"loss\":0.5}\n"}}, {"tau"}), FormatError);
  CHECK_THROWS_AS(render_svg(Chart{}), FormatError);
  // Constant series still render.
  const Chart flat = chart_from_jsonl({{"f", "{\"step\":0,\"loss\":0.5}\n{\"step\":1,\"loss\":0.5}\n"}});
  CHECK_NOTHROW(render_svg(flat));
}

TEST_CASE("run manifest round trip and recomputable hash") {
  KeyValueConfig kv = KeyValueConfig::parse(kTinySprite);
  const RunConfig cfg = RunConfig::from_kv(kv);
  RunManifest m;
  m.config_text = cfg.text();
  m.config_hash = hex64(cfg.hash());
  m.seed = cfg.train.seed;
  m.world = "sprite";
  m.overrides = {"M_tr=2", "seed=5"};
  m.started_at = utc_timestamp();
  m.out_dir = "somewhere";
  CHECK(m.hash_matches());
  CHECK(std::regex_match(m.started_at, std::regex(R"(\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ)")));

  const RunManifest back = RunManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK(back.hash_matches());
  CHECK(back.overrides == m.overrides);
  // The snapshot alone reproduces the config.
  CHECK(RunConfig::from_kv(KeyValueConfig::parse(back.config_text)).hash() == cfg.hash());

  RunManifest tampered = back;
  tampered.config_text += "# edited\n";
  CHECK_FALSE(tampered.hash_matches());
  CHECK_THROWS_AS(RunManifest::from_json("{\"seed\":1}"), FormatError);
  CHECK_THROWS_AS(RunManifest::from_json("nope"), FormatError);
}

TEST_CASE("output directory policy") {
  const auto root = scratch("policy");
  const auto dir = root / "run";
  CHECK_NOTHROW(prepare_out_dir(dir.string(), false));  // created
  CHECK(fs::is_directory(dir));
  CHECK_NOTHROW(prepare_out_dir(dir.string(), false));  // empty is fine
  spit(dir / "keep.txt", "x");
  CHECK_THROWS_AS(prepare_out_dir(dir.string(), false), ConfigError);
  CHECK(fs::exists(dir / "keep.txt"));
  CHECK_NOTHROW(prepare_out_dir(dir.string(), true));
  CHECK(fs::is_empty(dir));
  spit(root / "file", "x");
  CHECK_THROWS_AS(prepare_out_dir((root / "file").string(), true), ConfigError);
  CHECK_THROWS_AS(check_out_file((root / "file").string(), false), ConfigError);
  CHECK_NOTHROW(check_out_file((root / "file").string(), true));
  CHECK_NOTHROW(check_out_file((root / "new" / "f.svg").string(), false));
  CHECK(fs::is_directory(root / "new"));

  CHECK(resolve_out_path("explicit", "d") == "explicit");
  ::setenv(kOutputRootEnv, root.c_str(), 1);
  CHECK(resolve_out_path("", "d") == (root / "d").string());
  ::unsetenv(kOutputRootEnv);
  CHECK(resolve_out_path("", "d") == (fs::path("runs") / "d").string());
}

TEST_CASE("presets") {
  for (const auto& name : preset_names()) {
    INFO(name);
    CHECK_NOTHROW(RunConfig::from_kv(preset_config(name)));
  }
  CHECK(RunConfig::from_kv(preset_config("desk")).hash() == RunConfig::from_kv(KeyValueConfig{}).hash());
  const RunConfig fast = RunConfig::from_kv(preset_config("fast"));
  CHECK(fast.world.resolution == 32);
  CHECK(fast.model.d_z == 64);
  const RunConfig paper = RunConfig::from_kv(preset_config("paper"));
  CHECK(paper.train.batch_size == 512);
  CHECK_THROWS_AS(preset_config("huge"), ConfigError);
}

// ---------------------------------------------------------------------------
// command line

TEST_CASE("usage errors exit 2, help exits 0") {
  const auto dir = scratch("usage");
  CHECK(cli(dir, "").code == 2);
  CHECK(cli(dir, "frobnicate").code == 2);
  CHECK(cli(dir, "--help").code == 0);
  CHECK(cli(dir, "train --help").code == 0);
  CHECK(cli(dir, "train --config \"" + (dir / "missing.cfg").string() + "\"").code == 2);
  CHECK(cli(dir, "train --preset nope --out \"" + (dir / "x").string() + "\"").code == 2);

  spit(dir / "bad.cfg", std::string(kTinySprite) + "d_zz = 3\n");
  const Run bad = cli(dir, "train --config \"" + (dir / "bad.cfg").string() + "\" --out \"" + (dir / "b").string() + "\"");
  CHECK(bad.code == 2);
  CHECK(bad.err.find("d_zz") != std::string::npos);  // field-level message
  spit(dir / "ok.cfg", kTinySprite);
  const Run badset = cli(dir, "train --config \"" + (dir / "ok.cfg").string() + "\" --set M_tr=zero --out \"" +
                                  (dir / "c").string() + "\"");
  CHECK(badset.code == 2);
  CHECK(badset.err.find("M_tr") != std::string::npos);
  CHECK(cli(dir, "chart \"" + (dir / "nothing.jsonl").string() + "\"").code == 2);
}

TEST_CASE("train writes manifest first, records overrides and is reproducible") {
  const auto dir = scratch("train");
  spit(dir / "rot.cfg", kTinySprite);
  const std::string cfg = "--config \"" + (dir / "rot.cfg").string() + "\"";
  const Run a = cli(dir, "train " + cfg + " --set M_tr=3 --set seed=9 --out \"" + (dir / "a").string() + "\"");
  REQUIRE_MESSAGE(a.code == 0, a.err);
  const RunManifest m = RunManifest::from_json(slurp(dir / "a" / "run_manifest.json"));
  CHECK(m.hash_matches());
  CHECK(m.overrides == std::vector<std::string>{"M_tr=3", "seed=9"});
  CHECK(m.seed == 9);
  CHECK(m.world == "sprite");
  CHECK(m.artifact_version == kArtifactVersion);
  CHECK_FALSE(m.started_at.empty());
  CHECK_FALSE(m.finished_at.empty());
  const RunConfig snap = RunConfig::from_kv(KeyValueConfig::parse(m.config_text));
  CHECK(snap.train.M_tr == 3);
  CHECK(slurp(dir / "a" / "config.cfg") == m.config_text);
  CHECK(fs::exists(dir / "a" / "final.bin"));
  CHECK(lines(slurp(dir / "a" / "metrics.jsonl")).size() == 4);

  // Collision policy.
  const Run again = cli(dir, "train " + cfg + " --set M_tr=3 --set seed=9 --out \"" + (dir / "a").string() + "\"");
  CHECK(again.code == 2);
  CHECK(fs::exists(dir / "a" / "final.bin"));
  // Same config and seed, fresh directory: identical metrics.
  const Run b = cli(dir, "train " + cfg + " --set M_tr=3 --set seed=9 --out \"" + (dir / "b").string() + "\"");
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a" / "metrics.jsonl") == slurp(dir / "b" / "metrics.jsonl"));
  const Run forced =
      cli(dir, "train " + cfg + " --set M_tr=3 --set seed=9 --force --out \"" + (dir / "a").string() + "\"");
  CHECK(forced.code == 0);
  CHECK(slurp(dir / "a" / "metrics.jsonl") == slurp(dir / "b" / "metrics.jsonl"));

  // Default directory under the output-root variable.
  const std::string env = std::string(kOutputRootEnv) + "=\"" + (dir / "root").string() + "\" ";
  const std::string cmd = env + "\"" + SEQJEPA_CLI_PATH + "\" train " + cfg + " >/dev/null 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  const RunConfig plain = RunConfig::from_kv(KeyValueConfig::parse(kTinySprite));
  CHECK(fs::exists(dir / "root" / ("run-" + hex64(plain.hash()) + "-s5") / "run_manifest.json"));
}

TEST_CASE("numeric abort exits 3") {
  const auto dir = scratch("abort");
  spit(dir / "rot.cfg", kTinySprite);
  const Run r = cli(dir, "train --config \"" + (dir / "rot.cfg").string() +
                             "\" --set peak_lr=1e30 --set floor_lr=1e30 --set grad_clip=0 --set total_steps=6 --out \"" +
                             (dir / "r").string() + "\"");
  CHECK(r.code == 3);
  CHECK(r.err.find("step") != std::string::npos);
  // The manifest was written before the first step.
  CHECK(fs::exists(dir / "r" / "run_manifest.json"));
}

TEST_CASE("eval arities and config mismatch") {
  const auto dir = scratch("eval");
  spit(dir / "rot.cfg", kTinySprite);
  REQUIRE(cli(dir, "train --config \"" + (dir / "rot.cfg").string() + "\" --out \"" + (dir / "run").string() + "\"")
              .code == 0);
  const std::string ckpt = "\"" + (dir / "run" / "final.bin").string() + "\" ";

  const Run probe = cli(dir, "eval " + ckpt + "--probe class_on_agg --M_val 5 " + kSmallEval);
  REQUIRE_MESSAGE(probe.code == 0, probe.err);
  const auto pr = metric_lines(probe.out);
  REQUIRE(pr.size() == 1);
  CHECK(pr[0].metric == "top1");
  CHECK(pr[0].M_val == 5);
  CHECK(pr[0].value >= 0);
  CHECK(pr[0].value <= 1);

  const Run reg = cli(dir, "eval " + ckpt + "--probe action_regression " + kSmallEval);
  REQUIRE(reg.code == 0);
  REQUIRE(metric_lines(reg.out).size() == 1);
  CHECK(metric_lines(reg.out)[0].metric == "r2");

  const Run ret = cli(dir, "eval " + ckpt + "--retrieval --M_val 2 --n-candidates 6 " + kSmallEval);
  REQUIRE(ret.code == 0);
  CHECK(metric_lines(ret.out).size() == 3);

  const Run mx = cli(dir, "eval " + ckpt + "--matrix mtr=1,3 mval=1,3,5 " + kSmallEval + " --csv \"" +
                              (dir / "grid.csv").string() + "\" --out \"" + (dir / "m.jsonl").string() + "\"");
  REQUIRE_MESSAGE(mx.code == 0, mx.err);
  const auto cells = metric_lines(mx.out);
  CHECK(cells.size() == 6);
  CHECK(metric_lines(slurp(dir / "m.jsonl")).size() == 6);
  const auto grid = lines(slurp(dir / "grid.csv"));
  REQUIRE(grid.size() == 3);
  CHECK(grid[0] == "M_tr\\M_val,1,3,5");
  // --out collision.
  CHECK(cli(dir, "eval " + ckpt + "--probe class_on_agg " + kSmallEval + " --out \"" + (dir / "m.jsonl").string() +
                     "\"")
            .code == 2);

  // Matching and mismatching expected configs.
  CHECK(cli(dir, "eval " + ckpt + "--config \"" + (dir / "rot.cfg").string() + "\" --probe class_on_encoder " +
                     kSmallEval)
            .code == 0);
  const Run mismatch = cli(dir, "eval " + ckpt + "--config \"" + (dir / "rot.cfg").string() +
                                    "\" --set d_a=12 --probe class_on_agg " + kSmallEval);
  CHECK(mismatch.code == 2);
  CHECK(cli(dir, "eval " + ckpt + "--probe nonsense").code == 2);
  CHECK(cli(dir, "eval " + ckpt + "--probe class_on_agg --retrieval").code == 2);
  CHECK(cli(dir, "eval " + ckpt + "--matrix mtr=x").code == 2);
  CHECK(cli(dir, "eval " + ckpt + "--retrieval --n-candidates 5").code == 2);

  spit(dir / "junk.bin", "not a checkpoint");
  CHECK(cli(dir, "eval \"" + (dir / "junk.bin").string() + "\" --probe class_on_agg").code == 2);
}

TEST_CASE("eval path integration on a saccade checkpoint") {
  const auto dir = scratch("path");
  spit(dir / "sac.cfg", kTinySaccade);
  const Run t = cli(dir, "train --config \"" + (dir / "sac.cfg").string() + "\" --out \"" + (dir / "run").string() + "\"");
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const std::string ckpt = "\"" + (dir / "run" / "final.bin").string() + "\" ";
  const Run r = cli(dir, "eval " + ckpt + "--path-integration saccade --ablate actions " + kSmallEval);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto recs = metric_lines(r.out);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].metric == "path_r2");
  CHECK(recs[0].ablation == "actions");
  const Run many = cli(dir, "eval " + ckpt + "--path-integration saccade --M 2,4 " + kSmallEval);
  REQUIRE(many.code == 0);
  CHECK(metric_lines(many.out).size() == 2);
  CHECK(cli(dir, "eval " + ckpt + "--path-integration saccade --ablate sideways").code == 2);
}

TEST_CASE("sample dumps episodes deterministically") {
  const auto dir = scratch("sample");
  const Run a = cli(dir, "sample --set world=sprite --set resolution=16 --M 3 --seed 4 --out \"" +
                             (dir / "a").string() + "\"");
  REQUIRE_MESSAGE(a.code == 0, a.err);
  int views = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) views += e.path().extension() == ".ppm";
  CHECK(views == 4);
  const std::string rec = slurp(dir / "a" / "episode.txt");
  CHECK(count(rec, "\naction ") == 3);
  CHECK(count(rec, "cumulative: ") == 1);

  REQUIRE(cli(dir, "sample --set world=sprite --set resolution=16 --M 3 --seed 4 --out \"" + (dir / "b").string() +
                       "\"")
              .code == 0);
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
  }
  CHECK(cli(dir, "sample --set world=sprite --set resolution=16 --M 3 --seed 4 --out \"" + (dir / "a").string() + "\"")
            .code == 2);
  CHECK(cli(dir, "sample --M 0 --out \"" + (dir / "z").string() + "\"").code == 2);

  // Saccade: scene, overlay and IoR-separated fixations.
  const Run s = cli(dir, "sample --set world=saccade --M 5 --seed 1 --out \"" + (dir / "s").string() + "\"");
  REQUIRE_MESSAGE(s.code == 0, s.err);
  CHECK(fs::exists(dir / "s" / "scene.ppm"));
  CHECK(fs::exists(dir / "s" / "overlay.ppm"));
  const WorldConfig defaults;
  std::vector<std::pair<double, double>> fix;
  const std::regex re(R"(fixation_x=([-0-9.eE+]+) fixation_y=([-0-9.eE+]+))");
  for (const auto& l : lines(slurp(dir / "s" / "episode.txt"))) {
    std::smatch m;
    if (std::regex_search(l, m, re)) fix.emplace_back(std::stod(m[1]), std::stod(m[2]));
  }
  REQUIRE(fix.size() == 6);
  for (std::size_t i = 0; i < fix.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      CHECK(std::hypot(fix[i].first - fix[j].first, fix[i].second - fix[j].second) > defaults.ior_radius);
    }
  }
}

TEST_CASE("chart command") {
  const auto dir = scratch("chart");
  std::string loss;
  for (int s = 0; s < 100; ++s) loss += "{\"step\":" + std::to_string(s) + ",\"loss\":" + std::to_string(0.9 - 0.005 * s) + "}\n";
  spit(dir / "loss.jsonl", loss);
  const Run r = cli(dir, "chart \"" + (dir / "loss.jsonl").string() + "\" --out \"" + (dir / "loss.svg").string() + "\"");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string svg = slurp(dir / "loss.svg");
  CHECK(count(svg, "<polyline class=\"series\"") == 1);
  CHECK(svg.find("data-points=\"100\"") != std::string::npos);
  CHECK(cli(dir, "chart \"" + (dir / "loss.jsonl").string() + "\" --out \"" + (dir / "loss.svg").string() + "\"")
            .code == 2);

  spit(dir / "empty.jsonl", "");
  CHECK(cli(dir, "chart \"" + (dir / "empty.jsonl").string() + "\" --out \"" + (dir / "e.svg").string() + "\"").code ==
        2);
  CHECK_FALSE(fs::exists(dir / "e.svg"));

  spit(dir / "other.jsonl", loss);
  const Run two = cli(dir, "chart \"" + (dir / "loss.jsonl").string() + "\" \"" + (dir / "other.jsonl").string() +
                               "\" --out \"" + (dir / "two.svg").string() + "\"");
  REQUIRE(two.code == 0);
  const std::string svg2 = slurp(dir / "two.svg");
  CHECK(count(svg2, "class=\"legend-entry\"") == 2);
  CHECK(svg2.find(">loss: loss<") != std::string::npos);
  CHECK(svg2.find(">other: loss<") != std::string::npos);
}

TEST_CASE("export-embeddings writes one row per episode") {
  const auto dir = scratch("export");
  spit(dir / "rot.cfg", kTinySprite);
  REQUIRE(cli(dir, "train --config \"" + (dir / "rot.cfg").string() + "\" --out \"" + (dir / "run").string() + "\"")
              .code == 0);
  const std::string ckpt = "\"" + (dir / "run" / "final.bin").string() + "\" ";
  const Run r = cli(dir, "export-embeddings " + ckpt + "--episodes 12 --M_val 2 --out \"" + (dir / "emb").string() + "\"");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(lines(slurp(dir / "emb" / "labels.txt")).size() == 12);
  CHECK(fs::file_size(dir / "emb" / "embeddings.grid") > 0);
  CHECK(cli(dir, "export-embeddings " + ckpt + "--which middle --out \"" + (dir / "e2").string() + "\"").code == 2);
}
