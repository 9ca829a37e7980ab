// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "forgetlab/checkpoint_io.hpp"
#include "forgetlab/error.hpp"
#include "forgetlab/interventions.hpp"
#include "forgetlab/metrics.hpp"

namespace forgetlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::string> kRecordNames = {
    "accuracy",       "forgetting",        "first_epoch_cosine",      "data_similarity",
    "teacher_cosine", "train_loss",        "head_distance",           "head_disrupted",
    "entropy",        "specialization",    "attention_correlation",   "cka",
    "pc_rotation",    "representation_overlap", "task_relevance",     "task_relevance_top",
    "gradient_cosine", "gradient_segment_cosine", "gradient_conflict_fraction", "gradient_interference",
    "spectrum",       "spectrum_truncated", "linearity_index",        "linearity_r2_linear",
    "linearity_r2_quadratic", "routing_change",
};

const std::vector<std::string> kAnalyzeNames = {
    "attention", "head_distance", "entropy", "specialization", "attention_correlation", "cka",
    "pc_rotation", "task_relevance", "gradient", "spectrum", "linearity", "routing", "all",
};

std::string join(const std::vector<std::string>& items, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

std::string run_name(std::uint64_t seed) { return "run_" + std::to_string(seed); }

std::string task_suffix(std::size_t task) { return "@t" + std::to_string(task); }

class RowSink {
 public:
  RowSink(std::string run_id) : run_id_(std::move(run_id)) {}
  void stage(int task, std::size_t step) {
    task_ = task;
    step_ = step;
  }
  void add(const std::string& metric, double value, std::optional<std::size_t> layer = {},
           std::optional<std::size_t> head = {}) {
    rows.push_back({run_id_, task_, step_, metric, layer, head, value});
  }
  std::vector<MetricRecord> rows;

 private:
  std::string run_id_;
  int task_ = -1;
  std::size_t step_ = 0;
};

std::string fmt(double v) { return format_value(v); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::data, path.string() + ": " + e.what());
  }
}

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Batch head_rows(const Batch& b, std::size_t n) { return b.slice(0, std::min(n, b.size())); }

Batch concat(const Batch& a, const Batch& b) {
  Batch out = a;
  out.tokens.insert(out.tokens.end(), b.tokens.begin(), b.tokens.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

std::vector<TaskData> materialize(const TaskSequence& seq) {
  std::vector<TaskData> tasks;
  for (const auto& spec : seq.tasks) tasks.push_back(TaskData::generate(spec));
  return tasks;
}

struct RunArtifacts {
  std::vector<MetricRecord> rows;
  json manifest_entry;
};

RunArtifacts run_one(const fs::path& dir, const ExperimentConfig& config, std::uint64_t seed,
                     std::uint64_t config_hash) {
  const std::string run_id = run_name(seed);
  const fs::path run_dir = dir / run_id;
  fs::remove_all(run_dir);
  fs::create_directories(run_dir / "checkpoints");

  const TaskSequence seq = build_sequence(config, seed);
  const std::vector<TaskData> tasks = materialize(seq);
  TrainConfig tc = config.train;
  tc.seed = seed;
  RunOptions ro;
  ro.config_hash = config_hash;
  ro.sequence_id = std::string(to_string(seq.category)) + "-" + hex64(seq.seed);
  ExperimentRecord rec;
  try {
    rec = run_sequence(build_init(config, seed), tasks, config.model, tc, ro);
  } catch (const Error& e) {
    fail(e.code(), run_id + ": " + e.what());
  }

  for (const auto& c : rec.checkpoints) save_checkpoint(run_dir / "checkpoints" / c.meta.id, c, config.model);

  std::ostringstream log;
  log << "task,step,loss,lr,grad_norm,clipped_norm,clipped,penalty\n";
  for (const auto& l : rec.logs)
    for (const auto& s : l.steps)
      log << l.task_index << ',' << s.step << ',' << fmt(s.loss) << ',' << fmt(s.lr) << ',' << fmt(s.grad_norm) << ','
          << fmt(s.clipped_norm) << ',' << (s.clipped ? 1 : 0) << ',' << fmt(s.penalty) << '\n';
  write_text_atomic(run_dir / "training_log.csv", log.str());

  std::ostringstream ev;
  ev << "train_task,epoch,step,task,accuracy\n";
  for (const auto& l : rec.logs)
    for (const auto& e : l.evals)
      for (std::size_t j = 0; j < e.accuracy.size(); ++j)
        ev << l.task_index << ',' << e.epoch << ',' << e.step << ',' << j << ',' << fmt(e.accuracy[j]) << '\n';
  write_text_atomic(run_dir / "epoch_evals.csv", ev.str());

  std::ostringstream lat;
  lat << "stage_task,checkpoint,step,task,accuracy\n";
  for (std::size_t j = 0; j < rec.init_accuracy.size(); ++j) lat << "-1,init,0," << j << ',' << fmt(rec.init_accuracy[j]) << '\n';
  for (const auto& s : rec.stages)
    for (std::size_t j = 0; j < s.accuracy.size(); ++j)
      lat << s.task_index << ',' << s.checkpoint_id << ',' << s.global_step << ',' << j << ',' << fmt(s.accuracy[j]) << '\n';
  write_text_atomic(run_dir / "eval_lattice.csv", lat.str());

  RowSink sink(run_id);
  const std::size_t n = rec.n_tasks();
  sink.stage(-1, 0);
  for (std::size_t j = 0; j < n; ++j) sink.add("accuracy" + task_suffix(j), rec.init_accuracy[j]);
  json stages = json::array(), cosines = json::array();
  for (std::size_t s = 0; s < n; ++s) {
    const auto& st = rec.stages[s];
    sink.stage(static_cast<int>(s), st.global_step);
    for (std::size_t j = 0; j < n; ++j) sink.add("accuracy" + task_suffix(j), st.accuracy[j]);
    for (std::size_t j = 0; j <= s; ++j) sink.add("forgetting" + task_suffix(j), rec.accuracy(j, j) - st.accuracy[j]);
    if (!rec.logs[s].steps.empty()) sink.add("train_loss", rec.logs[s].steps.back().loss);
    const double cos = rec.logs[s].first_epoch_mean_cosine();
    if (s >= 1) {
      sink.add("first_epoch_cosine", cos);
      sink.add("data_similarity" + task_suffix(s), data_similarity(tasks[s - 1].train, tasks[s].train));
      if (!tasks[s].spec.external) sink.add("teacher_cosine" + task_suffix(s), teacher_cosine(tasks[s - 1].spec, tasks[s].spec));
    }
    stages.push_back({{"task", s}, {"checkpoint", st.checkpoint_id}, {"global_step", st.global_step}, {"accuracy", st.accuracy}});
    cosines.push_back(std::isfinite(cos) ? json(cos) : json(nullptr));
  }
  json targets = json::array();
  for (const auto& t : rec.curvature_targets) targets.push_back({{"source_task", t.source_task}, {"values", t.target_values}});
  json ckpts = json::array();
  for (const auto& c : rec.checkpoints) ckpts.push_back(c.meta.id);
  json record = {{"run_id", run_id},
                 {"seed", seed},
                 {"sequence_id", rec.sequence_id},
                 {"config_hash", hex64(config_hash)},
                 {"record_hash", hex64(rec.hash())},
                 {"task_ids", rec.task_ids},
                 {"alphas", rec.alphas},
                 {"init_accuracy", rec.init_accuracy},
                 {"stages", stages},
                 {"checkpoints", ckpts},
                 {"first_epoch_cosine", cosines},
                 {"curvature_targets", targets}};
  write_text_atomic(run_dir / "record.json", record.dump(2) + "\n");
  return {std::move(sink.rows), {{"run_id", run_id}, {"seed", seed}, {"sequence_id", rec.sequence_id}}};
}

struct RunView {
  std::string run_id;
  std::uint64_t seed = 0;
  fs::path dir;
  json record;
};

std::vector<RunView> list_runs(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::data, "experiment directory " + dir.string() + " does not exist");
  const json manifest = read_json(dir / "manifest.json");
  std::vector<RunView> runs;
  for (const auto& r : manifest.at("runs")) {
    RunView v;
    v.run_id = r.at("run_id").get<std::string>();
    v.seed = r.at("seed").get<std::uint64_t>();
    v.dir = dir / v.run_id;
    v.record = read_json(v.dir / "record.json");
    runs.push_back(std::move(v));
  }
  return runs;
}

/// Init plus stage checkpoints of a run, loaded in stage order.
struct LoadedRun {
  std::vector<Checkpoint> checkpoints;  // [0] = init, [s + 1] = stage s
  std::vector<std::size_t> steps;
};

LoadedRun load_run(const RunView& run) {
  std::vector<std::string> ids{"init"};
  for (const auto& s : run.record.at("stages")) ids.push_back(s.at("checkpoint").get<std::string>());
  std::vector<std::string> missing;
  for (const auto& id : ids)
    if (!fs::is_directory(run.dir / "checkpoints" / id)) missing.push_back(id);
  require(missing.empty(), ErrorCode::data, run.run_id + ": missing checkpoint(s) " + join(missing, ", "));
  LoadedRun out;
  for (const auto& id : ids) {
    out.checkpoints.push_back(load_checkpoint(run.dir / "checkpoints" / id).checkpoint);
    out.steps.push_back(out.checkpoints.back().meta.global_step);
  }
  require(out.checkpoints.size() >= 2, ErrorCode::data, run.run_id + ": need at least 2 checkpoints");
  return out;
}

std::set<std::string> expand_selectors(const std::vector<std::string>& names, const ModelConfig& model) {
  std::set<std::string> out;
  for (const auto& raw : names) {
    std::string name = raw;
    name.erase(std::remove_if(name.begin(), name.end(), ::isspace), name.end());
    if (name.empty()) continue;
    if (std::find(kAnalyzeNames.begin(), kAnalyzeNames.end(), name) == kAnalyzeNames.end())
      fail(ErrorCode::schema, "unknown metric '" + name + "'; registry: " + join(kAnalyzeNames, ", "));
    if (name == "all") {
      for (const auto& n : kAnalyzeNames)
        if (n != "all" && n != "attention" && (n != "routing" || model.moe)) out.insert(n);
    } else if (name == "attention") {
      out.insert({"head_distance", "entropy", "specialization", "attention_correlation"});
    } else {
      out.insert(name);
    }
  }
  require(!out.empty(), ErrorCode::schema, "no metrics selected; registry: " + join(kAnalyzeNames, ", "));
  return out;
}

std::set<std::string> produced_names(const std::set<std::string>& selectors) {
  std::map<std::string, std::vector<std::string>> produces = {
      {"head_distance", {"head_distance", "head_disrupted"}},
      {"entropy", {"entropy"}},
      {"specialization", {"specialization"}},
      {"attention_correlation", {"attention_correlation"}},
      {"cka", {"cka", "representation_overlap"}},
      {"pc_rotation", {"pc_rotation"}},
      {"task_relevance", {"task_relevance", "task_relevance_top"}},
      {"gradient", {"gradient_cosine", "gradient_segment_cosine", "gradient_conflict_fraction", "gradient_interference"}},
      {"spectrum", {"spectrum", "spectrum_truncated"}},
      {"linearity", {"linearity_index", "linearity_r2_linear", "linearity_r2_quadratic"}},
      {"routing", {"routing_change"}},
  };
  std::set<std::string> out;
  for (const auto& s : selectors)
    for (const auto& n : produces.at(s)) out.insert(n);
  return out;
}

std::vector<MetricRecord> analyze_run(const RunView& run, const ExperimentConfig& config,
                                      const std::set<std::string>& sel, const MetricsConfig& mc) {
  const LoadedRun lr = load_run(run);
  const ModelConfig& model = config.model;
  const std::vector<TaskData> tasks = materialize(build_sequence(config, run.seed));
  const std::size_t n = lr.checkpoints.size() - 1;
  require(n <= tasks.size(), ErrorCode::data, run.run_id + ": more stages than tasks");
  auto probe = [&](std::size_t task) { return head_rows(tasks[task].val, mc.probe_examples); };
  auto has = [&](const char* s) { return sel.contains(s); };
  RowSink sink(run.run_id);

  // Single-checkpoint metrics; index k = -1 is init.
  const Batch probe0 = probe(0);
  const auto classes = vocab_quartiles(probe0.tokens, model.vocab_size);
  for (int k = -1; k < static_cast<int>(n); ++k) {
    const Checkpoint& ck = lr.checkpoints[static_cast<std::size_t>(k + 1)];
    sink.stage(k, lr.steps[static_cast<std::size_t>(k + 1)]);
    if (has("entropy") || has("specialization")) {
      const ActivationTrace trace = forward(ck.params, model, probe0);
      if (has("entropy")) {
        const Tensor e = attention_entropy(trace);
        for (std::size_t l = 0; l < model.n_layers; ++l)
          for (std::size_t h = 0; h < model.n_heads; ++h) sink.add("entropy", e.at(l, h), l, h);
      }
      if (has("specialization")) {
        const Tensor s = specialization_index(trace, classes);
        for (std::size_t l = 0; l < model.n_layers; ++l)
          for (std::size_t h = 0; h < model.n_heads; ++h) sink.add("specialization", s.at(l, h), l, h);
      }
    }
    const std::size_t own = static_cast<std::size_t>(std::max(k, 0));
    if (has("task_relevance") && !model.moe) {
      for (std::size_t l = 0; l < model.n_layers; ++l) {
        const TaskRelevance tr = task_relevance(ck.params, model, probe(own), l);
        for (std::size_t i = 0; i < tr.score.size(); ++i) {
          sink.add("task_relevance" + task_suffix(own), tr.score[i], l, i);
          sink.add("task_relevance_top" + task_suffix(own), tr.top[i] ? 1.0 : 0.0, l, i);
        }
      }
    }
    if (has("spectrum") && k >= 0) {
      LanczosOptions lo;
      lo.k = mc.spectrum_k;
      lo.m = mc.spectrum_m;
      lo.n_probes = mc.spectrum_probes;
      Rng rng(run.seed, 7000 + own);
      const auto est = lanczos_spectrum(classification_loss(model, head_rows(tasks[own].val, mc.spectrum_batch)),
                                        ck.params, lo, rng);
      for (std::size_t i = 0; i < est.eigenvalues.size(); ++i) sink.add("spectrum" + task_suffix(own), est.eigenvalues[i], {}, i);
      sink.add("spectrum_truncated" + task_suffix(own), est.truncated ? 1.0 : 0.0);
    }
  }

  // Pair metrics between consecutive lattice checkpoints.
  for (std::size_t s = 0; s < n; ++s) {
    const Checkpoint& prev = lr.checkpoints[s];
    const Checkpoint& cur = lr.checkpoints[s + 1];
    const std::size_t ref = s == 0 ? 0 : s - 1;
    sink.stage(static_cast<int>(s), lr.steps[s + 1]);
    if (has("head_distance")) {
      const HeadDistances d = head_weight_distances(prev.params, cur.params, model);
      for (std::size_t i = 0; i < d.distance.size(); ++i) {
        sink.add("head_distance", d.distance[i], i / model.n_heads, i % model.n_heads);
        sink.add("head_disrupted", d.disrupted[i] ? 1.0 : 0.0, i / model.n_heads, i % model.n_heads);
      }
    }
    if (has("attention_correlation") || has("routing")) {
      const Batch pb = probe(ref);
      const ActivationTrace ta = forward(prev.params, model, pb);
      const ActivationTrace tb = forward(cur.params, model, pb);
      if (has("attention_correlation")) {
        const Tensor c = attention_pattern_correlation(ta, tb);
        for (std::size_t l = 0; l < model.n_layers; ++l)
          for (std::size_t h = 0; h < model.n_heads; ++h) sink.add("attention_correlation", c.at(l, h), l, h);
      }
      if (has("routing")) sink.add("routing_change", routing_change(ta, tb));
    }
    if (has("cka") || has("pc_rotation")) {
      const Batch samples = head_rows(concat(tasks[ref].val, tasks[ref].test), mc.cka_samples);
      const EvalContext ca(prev.params, model), cb(cur.params, model);
      for (std::size_t l = 0; l < model.n_layers; ++l) {
        const Tensor ha = collect_hidden(ca, samples, l), hb = collect_hidden(cb, samples, l);
        if (has("cka")) {
          double v = kNaN;
          try {
            v = cka(ha, hb);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::undefined_value) throw;
          }
          sink.add("cka", v, l);
        }
        if (has("pc_rotation")) {
          const std::size_t kpc = std::min(mc.pc_k, model.d_model);
          std::vector<double> angles(kpc, kNaN);
          try {
            angles = pc_rotation(ha, hb, kpc);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::numeric) throw;
          }
          for (std::size_t i = 0; i < angles.size(); ++i) sink.add("pc_rotation", angles[i], l, i);
        }
      }
    }
    if (has("cka") && s >= 1) {
      // Overlap of tasks s - 1 and s as seen by the model entering task s.
      const Batch xa = head_rows(concat(tasks[s - 1].val, tasks[s - 1].test), mc.cka_samples);
      const Batch xb = head_rows(concat(tasks[s].val, tasks[s].test), mc.cka_samples);
      const EvalContext ctx(prev.params, model);
      for (std::size_t l = 0; l < model.n_layers; ++l) {
        double v = kNaN;
        try {
          v = representation_overlap(collect_hidden(ctx, xa, l), collect_hidden(ctx, xb, l));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::undefined_value) throw;
        }
        sink.add("representation_overlap", v, l);
      }
    }
    if (has("linearity")) {
      const LinearityReport rep = linearity(prev.params, cur.params, model, probe(ref), mc.linearity_points);
      sink.add("linearity_index" + task_suffix(ref), rep.index);
      sink.add("linearity_r2_linear" + task_suffix(ref), rep.r2_linear);
      sink.add("linearity_r2_quadratic" + task_suffix(ref), rep.r2_quadratic);
    }
    if (has("gradient") && s >= 1) {
      const GradientSnapshot gn = grad(classification_loss(model, probe(s)), prev.params);
      const GradientSnapshot go = grad(classification_loss(model, probe(s - 1)), prev.params);
      double c = kNaN;
      try {
        c = gradient_cosine(gn.flat, go.flat);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::undefined_value) throw;
      }
      const auto seg = gradient_cosine_per_segment(gn, go);
      sink.add("gradient_cosine", c);
      sink.add("gradient_interference", std::isnan(c) ? kNaN : (is_interference(c) ? 1.0 : 0.0));
      double cf = kNaN;
      try {
        cf = conflict_fraction(seg);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::undefined_value) throw;
      }
      sink.add("gradient_conflict_fraction", cf);
      for (std::size_t i = 0; i < seg.size(); ++i) sink.add("gradient_segment_cosine", seg[i], {}, i);
    }
  }
  return std::move(sink.rows);
}

}  // namespace

constexpr const char* kMetricsHeader = "run_id,stage_task,stage_step,metric,layer,head,value";

const std::vector<std::string>& record_registry() { return kRecordNames; }
const std::vector<std::string>& analyze_registry() { return kAnalyzeNames; }

std::string metric_base(const std::string& metric) { return metric.substr(0, metric.find('@')); }

std::string format_value(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string metrics_csv(const std::vector<MetricRecord>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    const std::string base = metric_base(r.metric);
    require(std::find(kRecordNames.begin(), kRecordNames.end(), base) != kRecordNames.end(), ErrorCode::runtime,
            "metric '" + r.metric + "' is not in the registry");
    out += r.run_id + "," + std::to_string(r.stage_task) + "," + std::to_string(r.stage_step) + "," + r.metric + "," +
           (r.layer ? std::to_string(*r.layer) : "") + "," + (r.head ? std::to_string(*r.head) : "") + "," +
           format_value(r.value) + "\n";
  }
  return out;
}

std::vector<MetricRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<MetricRecord> rows;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      require(line == kMetricsHeader, ErrorCode::data, "metrics.csv: unexpected header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        cells.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    require(cells.size() == 7, ErrorCode::data, "metrics.csv line " + std::to_string(line_no) + ": expected 7 columns");
    MetricRecord r;
    try {
      r.run_id = cells[0];
      r.stage_task = std::stoi(cells[1]);
      r.stage_step = std::stoull(cells[2]);
      r.metric = cells[3];
      require(std::find(kRecordNames.begin(), kRecordNames.end(), metric_base(r.metric)) != kRecordNames.end(),
              ErrorCode::data, "metrics.csv line " + std::to_string(line_no) + ": unknown metric '" + r.metric + "'");
      if (!cells[4].empty()) r.layer = std::stoull(cells[4]);
      if (!cells[5].empty()) r.head = std::stoull(cells[5]);
      r.value = cells[6] == "NA" ? kNaN : std::stod(cells[6]);
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail(ErrorCode::data, "metrics.csv line " + std::to_string(line_no) + ": malformed value");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricRecord> read_metrics(const fs::path& experiment_dir) {
  const fs::path p = experiment_dir / "metrics.csv";
  require(fs::exists(p), ErrorCode::data, "no metrics.csv in " + experiment_dir.string());
  return parse_metrics_csv(read_text(p));
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(jobs, n); ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

fs::path resolve_output_dir(const ExperimentConfig& config) {
  if (const char* env = std::getenv("FORGETLAB_OUT"); env != nullptr && *env != '\0') return env;
  return config.output_dir;
}

fs::path cmd_run(const fs::path& config_path, const RunCommandOptions& options) {
  return cmd_run(load_config(config_path), options);
}

fs::path cmd_run(const ExperimentConfig& base, const RunCommandOptions& options) {
  ExperimentConfig config = base;
  for (auto& s : config.seeds) s = static_cast<std::uint64_t>(static_cast<std::int64_t>(s) + options.seed_offset);
  config.validate();
  const fs::path dir = resolve_output_dir(config);
  fs::create_directories(dir);
  const std::uint64_t hash = config.hash();

  std::vector<RunArtifacts> results(config.seeds.size());
  parallel_for(config.seeds.size(), options.jobs,
               [&](std::size_t i) { results[i] = run_one(dir, config, config.seeds[i], hash); });

  std::vector<MetricRecord> rows;
  json runs = json::array();
  for (auto& r : results) {
    rows.insert(rows.end(), r.rows.begin(), r.rows.end());
    runs.push_back(r.manifest_entry);
  }
  write_text_atomic(dir / "config.json", to_json(config).dump(2) + "\n");
  write_text_atomic(dir / "metrics.csv", metrics_csv(rows));
  json manifest = {{"format", "forgetlab-experiment"},
                   {"version", 1},
                   {"created_at", timestamp_utc()},
                   {"config_hash", hex64(hash)},
                   {"runs", runs}};
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return dir;
}

void cmd_analyze(const fs::path& dir, const AnalyzeOptions& options) {
  const ExperimentConfig config = load_config(dir / "config.json");
  const std::set<std::string> sel = expand_selectors(options.metrics, config.model);
  require(!sel.contains("routing") || config.model.moe, ErrorCode::config,
          "routing: the model has no mixture-of-experts layers");
  MetricsConfig mc = config.metrics;
  if (options.spectrum_k) mc.spectrum_k = *options.spectrum_k;
  if (options.spectrum_m) mc.spectrum_m = *options.spectrum_m;
  if (options.spectrum_probes) mc.spectrum_probes = *options.spectrum_probes;
  require(mc.spectrum_m >= mc.spectrum_k, ErrorCode::schema, "spectrum: m must be >= k");

  const std::vector<RunView> runs = list_runs(dir);
  std::vector<std::vector<MetricRecord>> fresh(runs.size());
  parallel_for(runs.size(), options.jobs, [&](std::size_t i) { fresh[i] = analyze_run(runs[i], config, sel, mc); });

  const std::set<std::string> replaced = produced_names(sel);
  std::vector<MetricRecord> rows;
  for (auto& r : read_metrics(dir))
    if (!replaced.contains(metric_base(r.metric))) rows.push_back(std::move(r));
  for (auto& f : fresh) rows.insert(rows.end(), f.begin(), f.end());
  write_text_atomic(dir / "metrics.csv", metrics_csv(rows));
}

InterventionKind intervention_from_string(const std::string& name) {
  if (name == "ablate") return InterventionKind::ablate;
  if (name == "realign") return InterventionKind::realign;
  if (name == "both") return InterventionKind::both;
  fail(ErrorCode::schema, "unknown intervention kind '" + name + "' (ablate, realign, both)");
}

const char* to_string(InterventionKind k) noexcept {
  switch (k) {
    case InterventionKind::ablate: return "ablate";
    case InterventionKind::realign: return "realign";
    case InterventionKind::both: return "both";
  }
  return "both";
}

json cmd_intervene(const fs::path& dir, const InterveneOptions& options) {
  const ExperimentConfig config = load_config(dir / "config.json");
  const ModelConfig& model = config.model;
  const std::size_t layer = options.layer.value_or(model.n_layers / 2);
  require(layer < model.n_layers, ErrorCode::schema, "layer: must be < model.n_layers");
  require(options.fraction >= 0.0 && options.fraction <= 1.0, ErrorCode::schema, "fraction: must lie in [0, 1]");
  const bool do_ablate = options.kind != InterventionKind::realign;
  const bool do_realign = options.kind != InterventionKind::ablate;

  json runs_out = json::array();
  double sum_recovery = 0.0;
  std::size_t n_recovery = 0;
  for (const RunView& run : list_runs(dir)) {
    const LoadedRun lr = load_run(run);
    const std::size_t n = lr.checkpoints.size() - 1;
    require(n >= 2 && options.task + 1 < n, ErrorCode::data,
            run.run_id + ": intervention needs a later stage after task " + std::to_string(options.task));
    const std::vector<TaskData> tasks = materialize(build_sequence(config, run.seed));
    const Checkpoint& post = lr.checkpoints[options.task + 1];
    const Checkpoint& forgotten = lr.checkpoints[n];
    const EvalContext ctx_post(post.params, model);
    const EvalContext ctx_forgotten(forgotten.params, model);
    EvalContext ctx = ctx_forgotten;

    std::vector<HeadId> heads;
    if (do_ablate && options.fraction > 0.0) {
      const Batch pb = head_rows(tasks[options.task].val, config.metrics.probe_examples);
      heads = select_disrupted(attention_stats(post.params, forgotten.params, model, pb), options.fraction);
      ctx = ablate(ctx, heads);
    }
    json map_info = nullptr;
    if (do_realign) {
      const Batch fit = head_rows(tasks[options.task].train, config.metrics.realign_samples);
      const Tensor pre_acts = collect_hidden(ctx_post, fit, layer, Pooling::all);
      const Tensor post_acts = collect_hidden(ctx, fit, layer, Pooling::all);
      const AffineMap map = fit_realignment(post_acts, pre_acts, layer);
      ctx = apply_realignment(ctx, map);
      const fs::path ck_dir = run.dir / "checkpoints" / forgotten.meta.id;
      save_affine_map(ck_dir, map);
      map_info = {{"layer", layer}, {"fit_residual", map.fit_residual},
                  {"file", (fs::path(run.run_id) / "checkpoints" / forgotten.meta.id / ("realign_" + std::to_string(layer) + ".bin")).string()}};
    }

    json per_task = json::array();
    for (std::size_t j = 0; j < tasks.size() && j < n; ++j) {
      const double a_post = batch_accuracy(EvalContext(lr.checkpoints[j + 1].params, model), tasks[j].test);
      const double a_forgot = batch_accuracy(ctx_forgotten, tasks[j].test);
      const double a_after = batch_accuracy(ctx, tasks[j].test);
      per_task.push_back({{"task", j}, {"acc_post_training", a_post}, {"acc_before", a_forgot}, {"acc_after", a_after}});
    }
    const auto& target = per_task[options.task];
    double raw = recovery_fraction(target["acc_after"].get<double>(), target["acc_before"].get<double>(),
                                   target["acc_post_training"].get<double>());
    if (options.kind == InterventionKind::ablate && options.fraction == 0.0) raw = 0.0;
    if (std::isfinite(raw)) {
      sum_recovery += raw;
      ++n_recovery;
    }
    json head_list = json::array();
    for (const auto& h : heads) head_list.push_back({h.layer, h.head});
    runs_out.push_back({{"run_id", run.run_id},
                        {"task", options.task},
                        {"forgotten_checkpoint", forgotten.meta.id},
                        {"post_checkpoint", post.meta.id},
                        {"tasks", per_task},
                        {"ablated_heads", head_list},
                        {"realignment", map_info},
                        {"recovery_raw", std::isfinite(raw) ? json(raw) : json(nullptr)},
                        {"recovery_display", std::isfinite(raw) ? json(display_recovery(raw)) : json(nullptr)}});
  }
  json report = {{"kind", to_string(options.kind)},
                 {"fraction", options.fraction},
                 {"layer", layer},
                 {"task", options.task},
                 {"runs", runs_out},
                 {"mean_recovery_raw", n_recovery ? json(sum_recovery / static_cast<double>(n_recovery)) : json(nullptr)}};
  write_text_atomic(dir / ("intervention_" + std::string(to_string(options.kind)) + ".json"), report.dump(2) + "\n");
  return report;
}

namespace {

struct Acc {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  }
  double mean() const { return n ? sum / static_cast<double>(n) : kNaN; }
};

json stat_json(const std::string& name, const std::vector<double>& xs, const std::vector<double>& ys, double m) {
  json j = {{"name", name}, {"n", xs.size()}, {"bonferroni_m", m}};
  try {
    const StatResult raw = pearson(xs, ys, 1.0);
    const StatResult adj = pearson(xs, ys, m);
    j["computable"] = true;
    j["r"] = raw.r;
    j["p_raw"] = raw.p;
    j["p_bonferroni"] = adj.p;
  } catch (const Error& e) {
    j["computable"] = false;
    j["reason"] = e.what();
  }
  return j;
}

}  // namespace

void cmd_report(const fs::path& dir) {
  const std::vector<MetricRecord> rows = read_metrics(dir);
  require(!rows.empty(), ErrorCode::data, "metrics.csv in " + dir.string() + " has no rows");
  const fs::path out = dir / "report";
  fs::create_directories(out);

  // Behavioral lattice.
  std::map<std::pair<int, std::size_t>, Acc> acc, forget;
  std::map<std::string, std::map<int, Acc>> cos_by_run;
  std::map<std::string, Acc> sim_by_run;
  std::map<std::string, int> last_stage;
  std::map<std::string, std::map<std::size_t, double>> final_forget;
  std::size_t n_tasks = 0;
  for (const auto& r : rows) {
    const std::string base = metric_base(r.metric);
    const auto at = r.metric.find("@t");
    const std::size_t task = at == std::string::npos ? 0 : std::stoul(r.metric.substr(at + 2));
    if (base == "accuracy") {
      n_tasks = std::max(n_tasks, task + 1);
      if (r.stage_task >= 0) acc[{r.stage_task, task}].add(r.value);
      last_stage[r.run_id] = std::max(last_stage[r.run_id], r.stage_task);
    } else if (base == "forgetting") {
      forget[{r.stage_task, task}].add(r.value);
    } else if (base == "first_epoch_cosine") {
      cos_by_run[r.run_id][r.stage_task].add(r.value);
    } else if (base == "data_similarity") {
      sim_by_run[r.run_id].add(r.value);
    }
  }
  for (const auto& r : rows)
    if (metric_base(r.metric) == "forgetting" && r.stage_task == last_stage[r.run_id]) {
      const std::size_t task = std::stoul(r.metric.substr(r.metric.find("@t") + 2));
      if (static_cast<int>(task) < r.stage_task) final_forget[r.run_id][task] = r.value;
    }
  require(!acc.empty(), ErrorCode::data, "metrics.csv has no accuracy rows");

  std::ostringstream fc;
  fc << "stage_task,task,n_runs,mean_accuracy,mean_forgetting\n";
  for (const auto& [key, a] : acc) {
    auto it = forget.find(key);
    fc << key.first << ',' << key.second << ',' << a.n << ',' << fmt(a.mean()) << ','
       << fmt(it == forget.end() ? kNaN : it->second.mean()) << '\n';
  }
  write_text_atomic(out / "forgetting_curves.csv", fc.str());

  std::vector<double> xs_cos, ys_cos, xs_sim, ys_sim;
  std::ostringstream gv;
  gv << "run_id,first_epoch_cosine,final_forgetting,data_similarity\n";
  for (const auto& [run, tasks] : final_forget) {
    Acc f;
    for (const auto& [t, v] : tasks) f.add(v);
    Acc c;
    if (auto it = cos_by_run.find(run); it != cos_by_run.end())
      for (const auto& [s, a] : it->second) c.add(a.mean());
    const double sim = sim_by_run.contains(run) ? sim_by_run[run].mean() : kNaN;
    gv << run << ',' << fmt(c.mean()) << ',' << fmt(f.mean()) << ',' << fmt(sim) << '\n';
    if (std::isfinite(c.mean()) && std::isfinite(f.mean())) {
      xs_cos.push_back(c.mean());
      ys_cos.push_back(f.mean());
    }
    if (std::isfinite(sim) && std::isfinite(f.mean())) {
      xs_sim.push_back(sim);
      ys_sim.push_back(f.mean());
    }
  }
  write_text_atomic(out / "gradient_vs_forgetting.csv", gv.str());

  // Per-series means over runs, keyed by (stage, layer, head).
  struct Series {
    const char* file;
    const char* header;
    std::map<std::tuple<int, long, long>, Acc> cells;
  };
  std::map<std::string, Series> series = {
      {"head_distance", {"head_distance.csv", "stage_task,layer,head,mean_distance", {}}},
      {"head_disrupted", {"head_disruption.csv", "stage_task,layer,head,disrupted_fraction", {}}},
      {"entropy", {"attention_entropy.csv", "stage_task,layer,head,mean_entropy_bits", {}}},
      {"specialization", {"specialization.csv", "stage_task,layer,head,mean_index", {}}},
      {"attention_correlation", {"attention_correlation.csv", "stage_task,layer,head,mean_correlation", {}}},
      {"cka", {"cka_by_layer.csv", "stage_task,layer,index,mean_cka", {}}},
      {"pc_rotation", {"pc_rotation.csv", "stage_task,layer,component,mean_angle_deg", {}}},
      {"spectrum", {"spectrum.csv", "stage_task,layer,index,mean_eigenvalue", {}}},
      {"linearity_index", {"linearity.csv", "stage_task,layer,index,mean_linearity_index", {}}},
      {"gradient_cosine", {"gradient_cosine.csv", "stage_task,layer,index,mean_cosine", {}}},
      {"gradient_conflict_fraction", {"gradient_conflict.csv", "stage_task,layer,index,mean_conflict_fraction", {}}},
      {"routing_change", {"routing_change.csv", "stage_task,layer,index,mean_fraction", {}}},
  };
  for (const auto& r : rows) {
    auto it = series.find(metric_base(r.metric));
    if (it == series.end()) continue;
    it->second.cells[{r.stage_task, r.layer ? static_cast<long>(*r.layer) : -1L, r.head ? static_cast<long>(*r.head) : -1L}].add(r.value);
  }
  for (const auto& [name, s] : series) {
    if (s.cells.empty()) continue;
    std::ostringstream os;
    os << s.header << '\n';
    auto cell = [](long v) { return v < 0 ? std::string() : std::to_string(v); };
    for (const auto& [key, a] : s.cells)
      os << std::get<0>(key) << ',' << cell(std::get<1>(key)) << ',' << cell(std::get<2>(key)) << ',' << fmt(a.mean()) << '\n';
    write_text_atomic(out / s.file, os.str());
  }

  const double m = 2.0;
  json summary = {{"n_runs", last_stage.size()},
                  {"n_tasks", n_tasks},
                  {"bonferroni_m", m},
                  {"correlations",
                   json::array({stat_json("early_warning: first_epoch_cosine vs final_forgetting", xs_cos, ys_cos, m),
                                stat_json("similarity_vs_forgetting: data_similarity vs final_forgetting", xs_sim, ys_sim, m)})}};
  write_text_atomic(out / "summary.json", summary.dump(2) + "\n");
}

}  // namespace forgetlab
