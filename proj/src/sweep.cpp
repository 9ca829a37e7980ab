// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/sweep.hpp"

#include <cmath>
#include <iostream>
#include <map>
#include <sstream>

#include "forgetlab/checkpoint_io.hpp"
#include "forgetlab/error.hpp"
#include "forgetlab/runner.hpp"

namespace forgetlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  }
  double value() const { return n ? sum / static_cast<double>(n) : kNaN; }
};

SweepStat correlate(const std::string& name, const std::string& x, const std::string& y,
                    const std::vector<SweepRow>& rows, double SweepRow::*fx, double SweepRow::*fy, double m) {
  SweepStat s;
  s.name = name;
  s.x = x;
  s.y = y;
  std::vector<double> xs, ys;
  for (const auto& r : rows)
    if (std::isfinite(r.*fx) && std::isfinite(r.*fy)) {
      xs.push_back(r.*fx);
      ys.push_back(r.*fy);
    }
  s.raw.n = s.adjusted.n = xs.size();
  s.adjusted.bonferroni_m = m;
  if (xs.size() < 3) {
    s.reason = "fewer than 3 valid points (" + std::to_string(xs.size()) + ")";
    return s;
  }
  try {
    s.raw = pearson(xs, ys, 1.0);
    s.adjusted = pearson(xs, ys, m);
    s.computable = true;
  } catch (const Error& e) {
    s.reason = e.what();
  }
  return s;
}

std::string category_for_alpha(double alpha) {
  for (auto c : {SimilarityCategory::high, SimilarityCategory::medium, SimilarityCategory::low})
    if (alpha_in_band(c, alpha)) return to_string(c);
  fail(ErrorCode::schema, "alphas: " + format_value(alpha) + " lies in no similarity band");
}

json nan_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

SweepResult aggregate(std::vector<SweepRow> rows) {
  SweepResult res;
  res.rows = std::move(rows);
  const double m = 2.0;
  res.stats.push_back(correlate("similarity_vs_forgetting", "data_similarity", "final_forgetting", res.rows,
                                &SweepRow::data_similarity, &SweepRow::final_forgetting, m));
  res.stats.push_back(correlate("early_warning", "first_epoch_cosine", "final_forgetting", res.rows,
                                &SweepRow::first_epoch_cosine, &SweepRow::final_forgetting, m));
  if (res.rows.size() < 5)
    res.warnings.push_back("sweep has " + std::to_string(res.rows.size()) + " runs; at least 5 are expected");
  for (const auto& s : res.stats)
    if (!s.computable) res.warnings.push_back(s.name + " not computable: " + s.reason);
  return res;
}

SweepRow sweep_row(const ExperimentRecord& record, std::span<const TaskData> tasks, std::uint64_t seed,
                   const std::string& category) {
  const RunPoint p = summarize_run(record);
  SweepRow row;
  row.run_id = record.sequence_id + "-run_" + std::to_string(seed);
  row.seed = seed;
  row.alpha = tasks.back().spec.alpha;
  row.category = category;
  row.first_epoch_cosine = p.first_epoch_cosine;
  row.final_forgetting = p.final_forgetting;
  Mean sim, teach;
  for (std::size_t j = 1; j < tasks.size(); ++j) {
    sim.add(data_similarity(tasks[j - 1].train, tasks[j].train));
    if (!tasks[j].spec.external) teach.add(teacher_cosine(tasks[j - 1].spec, tasks[j].spec));
  }
  row.data_similarity = sim.value();
  row.teacher_cosine = teach.value();
  return row;
}

SweepResult sweep(const std::vector<ExperimentConfig>& configs, std::size_t jobs) {
  struct Job {
    const ExperimentConfig* config;
    std::uint64_t seed;
  };
  std::vector<Job> work;
  for (const auto& c : configs) {
    c.validate();
    for (auto s : c.seeds) work.push_back({&c, s});
  }
  std::vector<SweepRow> rows(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    const ExperimentConfig& c = *work[i].config;
    const std::uint64_t seed = work[i].seed;
    const TaskSequence seq = build_sequence(c, seed);
    std::vector<TaskData> tasks;
    for (const auto& spec : seq.tasks) tasks.push_back(TaskData::generate(spec));
    TrainConfig tc = c.train;
    tc.seed = seed;
    RunOptions ro;
    ro.keep_intermediate = false;
    ro.config_hash = c.hash();
    ro.sequence_id = std::string(to_string(seq.category)) + "-" + hex64(seq.seed);
    const ExperimentRecord rec = run_sequence(build_init(c, seed), tasks, c.model, tc, ro);
    rows[i] = sweep_row(rec, tasks, seed, to_string(seq.category));
  });
  return aggregate(std::move(rows));
}

std::vector<SweepRow> load_sweep_rows(const fs::path& dir) {
  const ExperimentConfig config = load_config(dir / "config.json");
  const json manifest = json::parse(read_text(dir / "manifest.json"));
  const std::vector<MetricRecord> metrics = read_metrics(dir);
  std::vector<SweepRow> rows;
  for (const auto& r : manifest.at("runs")) {
    const std::string run_id = r.at("run_id").get<std::string>();
    const json record = json::parse(read_text(dir / run_id / "record.json"));
    const auto alphas = record.at("alphas").get<std::vector<double>>();
    const int last = static_cast<int>(record.at("stages").size()) - 1;
    require(last >= 1, ErrorCode::data, run_id + ": needs at least 2 stages");
    SweepRow row;
    row.run_id = record.at("sequence_id").get<std::string>() + "-" + run_id;
    row.seed = r.at("seed").get<std::uint64_t>();
    row.alpha = alphas.back();
    row.category = to_string(config.sequence.category);
    Mean cos, forget, sim, teach;
    for (const auto& m : metrics) {
      if (m.run_id != run_id) continue;
      const std::string base = metric_base(m.metric);
      if (base == "first_epoch_cosine") cos.add(m.value);
      if (base == "data_similarity") sim.add(m.value);
      if (base == "teacher_cosine") teach.add(m.value);
      if (base == "forgetting" && m.stage_task == last && m.metric != "forgetting@t" + std::to_string(last))
        forget.add(m.value);
    }
    row.first_epoch_cosine = cos.value();
    row.final_forgetting = forget.value();
    row.data_similarity = sim.value();
    row.teacher_cosine = teach.value();
    rows.push_back(std::move(row));
  }
  return rows;
}

SweepSpec parse_sweep_spec(const json& j) {
  require(j.is_object(), ErrorCode::schema, "sweep: expected an object");
  for (const auto& [k, v] : j.items())
    require(k == "experiment" || k == "alphas" || k == "output_dir", ErrorCode::schema, k + ": unknown field");
  require(j.contains("experiment"), ErrorCode::schema, "experiment: required field missing");
  require(j.contains("output_dir") && j["output_dir"].is_string(), ErrorCode::schema,
          "output_dir: required string field missing");
  SweepSpec spec;
  spec.output_dir = j["output_dir"].get<std::string>();
  json base = j["experiment"];
  require(base.is_object(), ErrorCode::schema, "experiment: expected an object");
  if (!base.contains("output_dir")) base["output_dir"] = spec.output_dir.string();
  if (!j.contains("alphas")) {
    spec.configs.push_back(parse_config(base));
    return spec;
  }
  require(j["alphas"].is_array() && !j["alphas"].empty(), ErrorCode::schema, "alphas: expected a nonempty array");
  for (const auto& a : j["alphas"]) {
    require(a.is_number(), ErrorCode::schema, "alphas: expected numbers");
    const double alpha = a.get<double>();
    json c = base;
    c["sequence"]["category"] = category_for_alpha(alpha);
    c["sequence"]["alpha"] = alpha;
    spec.configs.push_back(parse_config(c));
  }
  return spec;
}

SweepSpec load_sweep_spec(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, path.string() + ": " + e.what());
  }
  return parse_sweep_spec(j);
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "run_id,seed,alpha,category,first_epoch_cosine,final_forgetting,data_similarity,teacher_cosine\n";
  for (const auto& r : rows)
    os << r.run_id << ',' << r.seed << ',' << format_value(r.alpha) << ',' << r.category << ','
       << format_value(r.first_epoch_cosine) << ',' << format_value(r.final_forgetting) << ','
       << format_value(r.data_similarity) << ',' << format_value(r.teacher_cosine) << '\n';
  return os.str();
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<SweepRow> rows;
  std::size_t no = 0;
  auto num = [](const std::string& s) { return s == "NA" ? kNaN : std::stod(s); };
  while (std::getline(in, line)) {
    if (++no == 1 || line.empty()) continue;
    std::vector<std::string> c;
    std::istringstream cells(line);
    for (std::string cell; std::getline(cells, cell, ',');) c.push_back(cell);
    require(c.size() == 8, ErrorCode::data, "sweep.csv line " + std::to_string(no) + ": expected 8 columns");
    try {
      rows.push_back({c[0], std::stoull(c[1]), num(c[2]), c[3], num(c[4]), num(c[5]), num(c[6]), num(c[7])});
    } catch (const std::exception&) {
      fail(ErrorCode::data, "sweep.csv line " + std::to_string(no) + ": malformed value");
    }
  }
  return rows;
}

json summary_json(const SweepResult& result) {
  json stats = json::array();
  for (const auto& s : result.stats) {
    json j = {{"name", s.name}, {"x", s.x}, {"y", s.y}, {"n", s.raw.n}, {"computable", s.computable},
              {"bonferroni_m", s.adjusted.bonferroni_m}};
    if (s.computable) {
      j["r"] = nan_null(s.raw.r);
      j["p_raw"] = nan_null(s.raw.p);
      j["p_bonferroni"] = nan_null(s.adjusted.p);
      j["sign"] = s.raw.r > 0 ? "positive" : (s.raw.r < 0 ? "negative" : "zero");
    } else {
      j["reason"] = s.reason;
    }
    stats.push_back(j);
  }
  return {{"n_runs", result.rows.size()}, {"correlations", stats}, {"warnings", result.warnings}};
}

void write_sweep(const fs::path& dir, const SweepResult& result) {
  fs::create_directories(dir);
  write_text_atomic(dir / "sweep.csv", sweep_csv(result.rows));
  write_text_atomic(dir / "sweep_summary.json", summary_json(result).dump(2) + "\n");
}

}  // namespace forgetlab
