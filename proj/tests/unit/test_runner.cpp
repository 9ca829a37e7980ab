// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>

#include "forgetlab/checkpoint_io.hpp"
#include "forgetlab/error.hpp"
#include "forgetlab/runner.hpp"
#include "support.hpp"

using namespace forgetlab;
using namespace forgetlab::testing;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct Failure {
  ErrorCode code = ErrorCode::runtime;
  std::string message;
};

Failure failure_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return {e.code(), e.what()};
  }
  return {};
}

std::vector<MetricRecord> rows_named(const std::vector<MetricRecord>& rows, const std::string& base) {
  std::vector<MetricRecord> out;
  for (const auto& r : rows)
    if (metric_base(r.metric) == base) out.push_back(r);
  return out;
}

std::size_t csv_lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

/// Runs the tiny experiment once per test binary and shares the directory.
const fs::path& analyzed_experiment() {
  static TempDir dir("runner-shared");
  static const bool ready = [] {
    cmd_run(tiny_experiment(dir / "exp", {1, 2}), {0, 2});
    cmd_analyze(dir / "exp", {});
    return true;
  }();
  (void)ready;
  static const fs::path p = dir / "exp";
  return p;
}

}  // namespace

TEST_CASE("metrics csv round-trips", "[runner][csv]") {
  const std::vector<MetricRecord> rows{
      {"run_1", -1, 0, "accuracy@t0", std::nullopt, std::nullopt, 0.25},
      {"run_1", 0, 10, "cka@t0", 1, std::nullopt, 0.1 + 0.2},
      {"run_2", 1, 20, "head_distance", 0, 1, 1e-300},
      {"run_2", 1, 20, "spectrum@t1", std::nullopt, 3, -7.5e12},
  };
  const std::string text = metrics_csv(rows);
  CHECK(text.rfind("run_id,stage_task,stage_step,metric,layer,head,value\n", 0) == 0);
  CHECK(parse_metrics_csv(text) == rows);

  std::vector<MetricRecord> na{{"run_1", 0, 1, "cka@t0", 0, std::nullopt, std::nan("")}};
  const std::string na_text = metrics_csv(na);
  CHECK_THAT(na_text, Catch::Matchers::ContainsSubstring(",NA\n"));
  CHECK(std::isnan(parse_metrics_csv(na_text).at(0).value));
  CHECK(format_value(0.1) == "0.10000000000000001");
}

TEST_CASE("metrics csv rejects names outside the registry", "[runner][csv]") {
  const std::vector<MetricRecord> rows{{"run_1", 0, 0, "vibes", std::nullopt, std::nullopt, 1.0}};
  CHECK_THROWS_AS(metrics_csv(rows), Error);
  CHECK_THROWS_AS(parse_metrics_csv("run_id,stage_task,stage_step,metric,layer,head,value\nrun_1,0,0,vibes,,,1\n"), Error);
  CHECK_THROWS_AS(parse_metrics_csv("wrong,header\n"), Error);
}

TEST_CASE("every analyze selector maps to registered rows", "[runner][registry]") {
  const auto& reg = record_registry();
  const std::set<std::string> names(reg.begin(), reg.end());
  for (const char* n : {"accuracy", "forgetting", "head_distance", "entropy", "specialization", "attention_correlation",
                        "cka", "pc_rotation", "task_relevance", "gradient_cosine", "gradient_conflict_fraction",
                        "spectrum", "linearity_index", "routing_change"})
    CHECK(names.contains(n));
  const auto& sel = analyze_registry();
  CHECK(std::find(sel.begin(), sel.end(), "all") != sel.end());
  CHECK(metric_base("cka@t3") == "cka");
  CHECK(metric_base("train_loss") == "train_loss");
}

TEST_CASE("parallel_for visits every index and rethrows in order", "[runner][parallel]") {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(37, 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  try {
    parallel_for(10, 3, [](std::size_t i) {
      if (i == 7 || i == 4) throw Error(ErrorCode::data, "boom " + std::to_string(i));
    });
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK_THAT(std::string(e.what()), Catch::Matchers::ContainsSubstring("boom 4"));
  }
}

TEST_CASE("FORGETLAB_OUT overrides the output directory", "[runner]") {
  ExperimentConfig c = tiny_experiment("configured");
  ::unsetenv("FORGETLAB_OUT");
  CHECK(resolve_output_dir(c) == fs::path("configured"));
  ::setenv("FORGETLAB_OUT", "/tmp/override", 1);
  CHECK(resolve_output_dir(c) == fs::path("/tmp/override"));
  ::unsetenv("FORGETLAB_OUT");
}

TEST_CASE("run writes the experiment layout", "[runner][run]") {
  const fs::path& dir = analyzed_experiment();
  for (const char* f : {"manifest.json", "config.json", "metrics.csv"}) CHECK(fs::exists(dir / f));
  const json manifest = json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["format"] == "forgetlab-experiment");
  CHECK(manifest["runs"].size() == 2);
  for (const char* run : {"run_1", "run_2"}) {
    for (const char* f : {"record.json", "training_log.csv", "epoch_evals.csv", "eval_lattice.csv"})
      CHECK(fs::exists(dir / run / f));
    const json rec = json::parse(slurp(dir / run / "record.json"));
    REQUIRE(rec["checkpoints"].size() >= 2);
    for (const auto& id : rec["checkpoints"]) CHECK(fs::is_directory(dir / run / "checkpoints" / id.get<std::string>()));
    // 2 tasks plus init, each evaluated on both tasks.
    CHECK(csv_lines(dir / run / "eval_lattice.csv") == 1 + 3 * 2);
    // 160 / 16 steps per task.
    CHECK(csv_lines(dir / run / "training_log.csv") == 1 + 2 * 10);
  }
}

TEST_CASE("a minimal one-task run leaves a checkpoint", "[runner][run]") {
  TempDir dir("runner");
  ExperimentConfig c = tiny_experiment(dir / "one");
  c.sequence.n_tasks = 1;
  c.train.total_steps = 10;
  const fs::path out = cmd_run(c);
  const json rec = json::parse(slurp(out / "run_1" / "record.json"));
  CHECK(rec["stages"].size() == 1);
  CHECK(fs::exists(out / "run_1" / "checkpoints" / "t0_s10" / "params.bin"));
}

TEST_CASE("reruns are byte-identical in data files", "[runner][run][determinism]") {
  TempDir dir("runner");
  const ExperimentConfig a = tiny_experiment(dir / "a", {3});
  ExperimentConfig b = a;
  b.output_dir = dir / "b";
  cmd_run(a);
  cmd_run(b, {0, 2});
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
  for (const char* f : {"record.json", "training_log.csv", "eval_lattice.csv"})
    CHECK(slurp(dir / "a" / "run_3" / f) == slurp(dir / "b" / "run_3" / f));
  CHECK(slurp(dir / "a" / "run_3" / "checkpoints" / "t1_s20" / "params.bin") ==
        slurp(dir / "b" / "run_3" / "checkpoints" / "t1_s20" / "params.bin"));
  // Rerunning in place regenerates the same files.
  const std::string before = slurp(dir / "a" / "metrics.csv");
  cmd_run(a);
  CHECK(slurp(dir / "a" / "metrics.csv") == before);
}

TEST_CASE("seed offset shifts the run seeds", "[runner][run]") {
  TempDir dir("runner");
  ExperimentConfig c = tiny_experiment(dir / "off", {1});
  c.train.total_steps = 2;
  cmd_run(c, {5, 1});
  CHECK(fs::exists(dir / "off" / "run_6" / "record.json"));
}

TEST_CASE("analyze emits every metric family", "[runner][analyze]") {
  const auto rows = read_metrics(analyzed_experiment());
  for (const char* base : {"head_distance", "head_disrupted", "entropy", "specialization", "attention_correlation", "cka",
                           "pc_rotation", "representation_overlap", "task_relevance", "task_relevance_top",
                           "gradient_cosine", "gradient_segment_cosine", "gradient_conflict_fraction",
                           "gradient_interference", "spectrum",
                           "linearity_index", "linearity_r2_linear", "linearity_r2_quadratic"}) {
    INFO(base);
    CHECK_FALSE(rows_named(rows, base).empty());
  }
  for (const auto& r : rows_named(rows, "cka")) {
    CHECK(r.layer.has_value());
    if (!std::isnan(r.value)) {
      CHECK(r.value >= 0.0);
      CHECK(r.value <= 1.0 + 1e-9);
    }
  }
  for (const auto& r : rows_named(rows, "spectrum")) CHECK(r.head.has_value());
  // Task pair (0, 1), one row per layer and run.
  const auto overlap = rows_named(rows, "representation_overlap");
  CHECK(overlap.size() == 2 * 2);
  for (const auto& r : overlap) {
    CHECK(r.stage_task == 1);
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0);
  }
  // Dense model: routing has nothing to report.
  CHECK(rows_named(rows, "routing_change").empty());
}

TEST_CASE("repeating analyze replaces rather than duplicates", "[runner][analyze]") {
  TempDir dir("runner");
  ExperimentConfig c = tiny_experiment(dir / "e");
  cmd_run(c);
  AnalyzeOptions o;
  o.metrics = {"cka", "head_distance"};
  cmd_analyze(dir / "e", o);
  const std::string once = slurp(dir / "e" / "metrics.csv");
  cmd_analyze(dir / "e", o);
  CHECK(slurp(dir / "e" / "metrics.csv") == once);
  CHECK(rows_named(read_metrics(dir / "e"), "spectrum").empty());
}

TEST_CASE("cka over duplicated checkpoints is one", "[runner][analyze]") {
  TempDir dir("runner");
  ExperimentConfig c = tiny_experiment(dir / "dup");
  c.train.total_steps = 0;
  cmd_run(c);
  AnalyzeOptions o;
  o.metrics = {"cka", "head_distance"};
  cmd_analyze(dir / "dup", o);
  const auto rows = read_metrics(dir / "dup");
  const auto cka = rows_named(rows, "cka");
  REQUIRE_FALSE(cka.empty());
  for (const auto& r : cka) CHECK(std::abs(r.value - 1.0) < 1e-9);
  for (const auto& r : rows_named(rows, "head_distance")) CHECK(r.value == 0.0);
}

TEST_CASE("spectrum overrides control the row count", "[runner][analyze]") {
  TempDir dir("runner");
  cmd_run(tiny_experiment(dir / "s"));
  AnalyzeOptions o;
  o.metrics = {"spectrum"};
  o.spectrum_k = 2;
  o.spectrum_m = 4;
  o.spectrum_probes = 1;
  cmd_analyze(dir / "s", o);
  std::map<std::string, std::size_t> per_stage;
  for (const auto& r : rows_named(read_metrics(dir / "s"), "spectrum")) ++per_stage[r.metric];
  REQUIRE(per_stage.size() == 2);
  for (const auto& [name, n] : per_stage) CHECK(n <= 2);
  o.spectrum_k = 5;
  o.spectrum_m = 3;
  CHECK_THROWS_AS(cmd_analyze(dir / "s", o), Error);
}

TEST_CASE("unknown metric is a schema error listing the registry", "[runner][analyze]") {
  AnalyzeOptions o;
  o.metrics = {"bogus"};
  const Failure f = failure_of([&] { cmd_analyze(analyzed_experiment(), o); });
  CHECK(f.code == ErrorCode::schema);
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("bogus"));
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("spectrum"));
}

TEST_CASE("analyze reports a missing checkpoint by id", "[runner][analyze]") {
  TempDir dir("runner");
  cmd_run(tiny_experiment(dir / "m"));
  fs::remove_all(dir / "m" / "run_1" / "checkpoints" / "t0_s10");
  AnalyzeOptions o;
  o.metrics = {"cka"};
  const Failure f = failure_of([&] { cmd_analyze(dir / "m", o); });
  CHECK(f.code == ErrorCode::data);
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("t0_s10"));
}

TEST_CASE("intervene writes a report per kind", "[runner][intervene]") {
  TempDir dir("runner");
  cmd_run(tiny_experiment(dir / "i", {1}));
  for (auto kind : {InterventionKind::ablate, InterventionKind::realign, InterventionKind::both}) {
    InterveneOptions o;
    o.kind = kind;
    o.fraction = 0.25;
    const json rep = cmd_intervene(dir / "i", o);
    const fs::path file = dir / "i" / ("intervention_" + std::string(to_string(kind)) + ".json");
    REQUIRE(fs::exists(file));
    CHECK(json::parse(slurp(file)) == rep);
    REQUIRE(rep["runs"].size() == 1);
    const json& run = rep["runs"][0];
    CHECK(run["tasks"].size() == 2);
    CHECK(rep["layer"] == 1);
    if (kind != InterventionKind::realign) CHECK(run["ablated_heads"].size() == 1);
    if (!run["recovery_raw"].is_null()) {
      const double raw = run["recovery_raw"].get<double>();
      CHECK(run["recovery_display"].get<double>() == std::clamp(raw, -1.0, 2.0));
    }
  }
  CHECK(fs::exists(dir / "i" / "run_1" / "checkpoints" / "t1_s20" / "realign_1.bin"));
  CHECK(intervention_from_string("both") == InterventionKind::both);
  CHECK_THROWS_AS(intervention_from_string("surgery"), Error);
}

TEST_CASE("ablation with fraction zero recovers nothing", "[runner][intervene]") {
  TempDir dir("runner");
  cmd_run(tiny_experiment(dir / "z", {1}));
  InterveneOptions o;
  o.kind = InterventionKind::ablate;
  o.fraction = 0.0;
  const json rep = cmd_intervene(dir / "z", o);
  const json& run = rep["runs"][0];
  CHECK(run["ablated_heads"].empty());
  CHECK(run["recovery_raw"].get<double>() == 0.0);
  CHECK(run["tasks"][0]["acc_after"] == run["tasks"][0]["acc_before"]);
  o.task = 1;
  CHECK_THROWS_AS(cmd_intervene(dir / "z", o), Error);
}

TEST_CASE("report series and summary", "[runner][report]") {
  TempDir dir("runner");
  ExperimentConfig c = tiny_experiment(dir / "r", {1, 2, 3});
  c.sequence.n_tasks = 4;
  c.sequence.params.n_train = 64;
  cmd_run(c, {0, 3});
  cmd_report(dir / "r");
  const fs::path rep = dir / "r" / "report";
  // Header plus one row per (stage, task).
  CHECK(csv_lines(rep / "forgetting_curves.csv") == 1 + 4 * 4);
  CHECK(csv_lines(rep / "gradient_vs_forgetting.csv") == 1 + 3);
  const json summary = json::parse(slurp(rep / "summary.json"));
  REQUIRE(summary["correlations"].size() == 2);
  CHECK(summary["bonferroni_m"] == 2.0);
  for (const auto& corr : summary["correlations"]) {
    CHECK(corr["computable"].get<bool>());
    CHECK(corr.contains("r"));
    CHECK(corr.contains("p_raw"));
    CHECK(corr.contains("p_bonferroni"));
    CHECK(corr["p_bonferroni"].get<double>() >= corr["p_raw"].get<double>());
  }
  const std::string first = slurp(rep / "summary.json"), curves = slurp(rep / "forgetting_curves.csv");
  cmd_report(dir / "r");
  CHECK(slurp(rep / "summary.json") == first);
  CHECK(slurp(rep / "forgetting_curves.csv") == curves);
}

TEST_CASE("report needs metrics", "[runner][report]") {
  TempDir dir("runner");
  CHECK_THROWS_AS(cmd_report(dir / "absent"), Error);
  fs::create_directories(dir / "empty");
  write_text_atomic(dir / "empty" / "metrics.csv", metrics_csv({}));
  CHECK(failure_of([&] { cmd_report(dir / "empty"); }).code == ErrorCode::data);
}

TEST_CASE("config file path entry point", "[runner][run]") {
  TempDir dir("runner");
  ExperimentConfig c = tiny_experiment(dir / "viafile");
  c.train.total_steps = 2;
  write_text_atomic(dir / "c.json", to_json(c).dump());
  CHECK(cmd_run(dir / "c.json") == dir / "viafile");
  json bad = to_json(c);
  bad["model"].erase("d_model");
  write_text_atomic(dir / "bad.json", bad.dump());
  const Failure f = failure_of([&] { (void)cmd_run(dir / "bad.json"); });
  CHECK(f.code == ErrorCode::schema);
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("model.d_model"));
}
