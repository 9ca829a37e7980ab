// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/config.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "forgetlab/error.hpp"

namespace forgetlab {

using nlohmann::json;

namespace {

[[noreturn]] void schema_error(const std::string& path, const std::string& what) {
  fail(ErrorCode::schema, path + ": " + what);
}

/// Wraps one JSON object, tracking consumed keys so leftovers are reported.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) schema_error(path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) schema_error(at(key), "required field missing");
    return j_.at(key);
  }

  std::size_t count(const std::string& key) { return to_count(raw(key), at(key)); }
  std::size_t count(const std::string& key, std::size_t fallback) {
    seen_.insert(key);
    return has(key) ? count(key) : fallback;
  }
  double number(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number()) schema_error(at(key), "expected a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) {
    seen_.insert(key);
    return has(key) ? number(key) : fallback;
  }
  bool boolean(const std::string& key, bool fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_boolean()) schema_error(at(key), "expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) schema_error(at(key), "expected a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& key, const std::string& fallback) {
    seen_.insert(key);
    return has(key) ? string(key) : fallback;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) schema_error(at(key), "unknown field");
  }

  static std::size_t to_count(const json& v, const std::string& path) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      schema_error(path, "expected a non-negative integer");
    return v.get<std::size_t>();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void rethrow_as_schema(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::config) fail(ErrorCode::schema, e.what());
    throw;
  }
}

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

ModelConfig model_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  ModelConfig m;
  m.n_layers = f.count("n_layers");
  m.d_model = f.count("d_model");
  m.n_heads = f.count("n_heads");
  m.d_ff = f.count("d_ff");
  m.vocab_size = f.count("vocab_size");
  m.max_seq_len = f.count("max_seq_len");
  m.n_classes = f.count("n_classes");
  const std::string ffn = f.string("ffn", "swiglu");
  if (ffn == "swiglu") m.ffn = FfnKind::swiglu;
  else if (ffn == "gelu") m.ffn = FfnKind::gelu;
  else schema_error(f.at("ffn"), "expected \"swiglu\" or \"gelu\"");
  if (f.string("positional", "learned") != "learned") schema_error(f.at("positional"), "only \"learned\" is supported");
  if (f.has("moe")) {
    Fields mf(f.raw("moe"), f.at("moe"));
    MoeConfig moe;
    moe.n_experts = mf.count("n_experts");
    moe.top_k = mf.count("top_k");
    mf.finish();
    m.moe = moe;
  } else {
    f.boolean("moe", false);  // marks an explicit null as consumed
  }
  f.finish();
  rethrow_as_schema([&] { m.validate(); });
  return m;
}

json to_json(const ModelConfig& m) {
  json j = {{"n_layers", m.n_layers},   {"d_model", m.d_model},         {"n_heads", m.n_heads},
            {"d_ff", m.d_ff},           {"vocab_size", m.vocab_size},   {"max_seq_len", m.max_seq_len},
            {"n_classes", m.n_classes}, {"ffn", m.ffn == FfnKind::swiglu ? "swiglu" : "gelu"},
            {"positional", "learned"}};
  if (m.moe) j["moe"] = {{"n_experts", m.moe->n_experts}, {"top_k", m.moe->top_k}};
  return j;
}

namespace {

SequenceConfig sequence_from_json(const json& j, const ModelConfig& model) {
  Fields f(j, "sequence");
  SequenceConfig s;
  const std::string cat = f.string("category");
  rethrow_as_schema([&] { s.category = category_from_string(cat); });
  s.n_tasks = f.count("n_tasks");
  auto& p = s.params;
  p.vocab_size = model.vocab_size;
  p.n_classes = model.n_classes;
  p.seq_len = f.count("seq_len", model.max_seq_len);
  p.feature_dim = f.count("feature_dim", p.feature_dim);
  p.n_train = f.count("n_train", p.n_train);
  p.n_val = f.count("n_val", p.n_val);
  p.n_test = f.count("n_test", p.n_test);
  p.token_sharpness = f.number("token_sharpness", p.token_sharpness);
  if (f.has("alpha")) p.alpha = f.number("alpha");
  else f.number("alpha", 0.0);
  if (f.has("external")) {
    const json& ext = f.raw("external");
    if (!ext.is_array()) schema_error("sequence.external", "expected an array");
    for (std::size_t i = 0; i < ext.size(); ++i) {
      Fields ef(ext[i], "sequence.external[" + std::to_string(i) + "]");
      s.external.push_back({ef.string("train"), ef.string("val"), ef.string("test")});
      ef.finish();
    }
  } else {
    f.boolean("external", false);
  }
  f.finish();
  return s;
}

TrainConfig train_from_json(const json& j) {
  Fields f(j, "train");
  TrainConfig t;
  t.peak_lr = f.number("peak_lr", t.peak_lr);
  t.warmup_steps = f.count("warmup_steps", t.warmup_steps);
  t.epochs = f.count("epochs", t.epochs);
  if (f.has("total_steps")) t.total_steps = f.count("total_steps");
  else f.count("total_steps", 0);
  t.batch_size = f.count("batch_size", t.batch_size);
  t.beta1 = f.number("beta1", t.beta1);
  t.beta2 = f.number("beta2", t.beta2);
  t.weight_decay = f.number("weight_decay", t.weight_decay);
  t.adam_eps = f.number("adam_eps", t.adam_eps);
  if (j.contains("clip_norm") && j.at("clip_norm").is_null()) {
    f.raw("clip_norm");
    t.clip_norm.reset();
  } else {
    t.clip_norm = f.number("clip_norm", *t.clip_norm);
  }
  if (f.has("freeze")) {
    const json& fr = f.raw("freeze");
    if (!fr.is_array()) schema_error("train.freeze", "expected an array of group names");
    for (std::size_t i = 0; i < fr.size(); ++i) {
      const std::string path = "train.freeze[" + std::to_string(i) + "]";
      if (!fr[i].is_string()) schema_error(path, "expected a string");
      const auto name = fr[i].get<std::string>();
      if (name == "attention") t.freeze.insert(ComponentGroup::attention);
      else if (name == "feedforward") t.freeze.insert(ComponentGroup::feedforward);
      else if (name == "embed_out") t.freeze.insert(ComponentGroup::embed_out);
      else schema_error(path, "unknown group '" + name + "' (attention, feedforward, embed_out)");
    }
  } else {
    f.boolean("freeze", false);
  }
  if (f.has("curvature")) {
    Fields cf(f.raw("curvature"), "train.curvature");
    CurvatureConfig c;
    c.weight = cf.number("weight", c.weight);
    c.fd_step = cf.number("fd_step", c.fd_step);
    c.batch_size = cf.count("batch_size", c.batch_size);
    c.n_directions = cf.count("n_directions", c.n_directions);
    c.lanczos_iters = cf.count("lanczos_iters", c.lanczos_iters);
    cf.finish();
    t.curvature = c;
  } else {
    f.boolean("curvature", false);
  }
  t.checkpoint_every = f.count("checkpoint_every", t.checkpoint_every);
  t.reset_optimizer = f.boolean("reset_optimizer", t.reset_optimizer);
  t.divergence_factor = f.number("divergence_factor", t.divergence_factor);
  t.cosine_probes = f.count("cosine_probes", t.cosine_probes);
  t.probe_batch = f.count("probe_batch", t.probe_batch);
  t.eval_each_epoch = f.boolean("eval_each_epoch", t.eval_each_epoch);
  f.finish();
  rethrow_as_schema([&] { t.validate(); });
  return t;
}

MetricsConfig metrics_from_json(const json& j) {
  Fields f(j, "metrics");
  MetricsConfig m;
  m.probe_examples = f.count("probe_examples", m.probe_examples);
  m.cka_samples = f.count("cka_samples", m.cka_samples);
  m.realign_samples = f.count("realign_samples", m.realign_samples);
  m.spectrum_k = f.count("spectrum_k", m.spectrum_k);
  m.spectrum_m = f.count("spectrum_m", m.spectrum_m);
  m.spectrum_probes = f.count("spectrum_probes", m.spectrum_probes);
  m.spectrum_batch = f.count("spectrum_batch", m.spectrum_batch);
  m.linearity_points = f.count("linearity_points", m.linearity_points);
  m.pc_k = f.count("pc_k", m.pc_k);
  f.finish();
  return m;
}

}  // namespace

void ExperimentConfig::validate() const {
  rethrow_as_schema([&] {
    model.validate();
    train.validate();
  });
  require(!seeds.empty(), ErrorCode::schema, "seeds: at least one seed required");
  require(sequence.n_tasks >= 1 && sequence.n_tasks <= 8, ErrorCode::schema, "sequence.n_tasks: must lie in [1, 8]");
  require(sequence.params.seq_len >= 1 && sequence.params.seq_len <= model.max_seq_len, ErrorCode::schema,
          "sequence.seq_len: must lie in [1, model.max_seq_len]");
  require(sequence.external.empty() || sequence.external.size() == sequence.n_tasks, ErrorCode::schema,
          "sequence.external: need one entry per task");
  if (sequence.params.alpha)
    require(*sequence.params.alpha >= 0.0 && *sequence.params.alpha <= 1.0 &&
                alpha_in_band(sequence.category, *sequence.params.alpha),
            ErrorCode::schema, "sequence.alpha: outside the band of category '" +
                                   std::string(to_string(sequence.category)) + "'");
  require(metrics.spectrum_m >= metrics.spectrum_k, ErrorCode::schema, "metrics.spectrum_m: must be >= spectrum_k");
}

ExperimentConfig parse_config(const json& j) {
  Fields f(j, "");
  ExperimentConfig c;
  c.model = model_from_json(f.raw("model"), "model");
  c.sequence = sequence_from_json(f.raw("sequence"), c.model);
  c.train = f.has("train") ? train_from_json(f.raw("train")) : (f.boolean("train", false), TrainConfig{});
  c.metrics = f.has("metrics") ? metrics_from_json(f.raw("metrics")) : (f.boolean("metrics", false), MetricsConfig{});
  const json& seeds = f.raw("seeds");
  if (!seeds.is_array()) schema_error("seeds", "expected an array of non-negative integers");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    c.seeds.push_back(Fields::to_count(seeds[i], "seeds[" + std::to_string(i) + "]"));
  c.output_dir = f.string("output_dir");
  f.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::schema, path.string() + ": invalid JSON (" + e.what() + ")");
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json seq = {{"category", to_string(c.sequence.category)},
              {"n_tasks", c.sequence.n_tasks},
              {"seq_len", c.sequence.params.seq_len},
              {"feature_dim", c.sequence.params.feature_dim},
              {"n_train", c.sequence.params.n_train},
              {"n_val", c.sequence.params.n_val},
              {"n_test", c.sequence.params.n_test},
              {"token_sharpness", c.sequence.params.token_sharpness}};
  if (c.sequence.params.alpha) seq["alpha"] = *c.sequence.params.alpha;
  if (!c.sequence.external.empty()) {
    json ext = json::array();
    for (const auto& e : c.sequence.external)
      ext.push_back({{"train", e.train.string()}, {"val", e.val.string()}, {"test", e.test.string()}});
    seq["external"] = ext;
  }
  const auto& t = c.train;
  json freeze = json::array();
  for (auto g : t.freeze)
    freeze.push_back(g == ComponentGroup::attention ? "attention"
                     : g == ComponentGroup::feedforward ? "feedforward" : "embed_out");
  json train = {{"peak_lr", t.peak_lr},
                {"warmup_steps", t.warmup_steps},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"weight_decay", t.weight_decay},
                {"adam_eps", t.adam_eps},
                {"clip_norm", t.clip_norm ? json(*t.clip_norm) : json(nullptr)},
                {"freeze", freeze},
                {"checkpoint_every", t.checkpoint_every},
                {"reset_optimizer", t.reset_optimizer},
                {"divergence_factor", t.divergence_factor},
                {"cosine_probes", t.cosine_probes},
                {"probe_batch", t.probe_batch},
                {"eval_each_epoch", t.eval_each_epoch}};
  if (t.total_steps) train["total_steps"] = *t.total_steps;
  if (t.curvature)
    train["curvature"] = {{"weight", t.curvature->weight},
                          {"fd_step", t.curvature->fd_step},
                          {"batch_size", t.curvature->batch_size},
                          {"n_directions", t.curvature->n_directions},
                          {"lanczos_iters", t.curvature->lanczos_iters}};
  const auto& m = c.metrics;
  json metrics = {{"probe_examples", m.probe_examples},   {"cka_samples", m.cka_samples},
                  {"realign_samples", m.realign_samples}, {"spectrum_k", m.spectrum_k},
                  {"spectrum_m", m.spectrum_m},           {"spectrum_probes", m.spectrum_probes},
                  {"spectrum_batch", m.spectrum_batch},   {"linearity_points", m.linearity_points},
                  {"pc_k", m.pc_k}};
  return {{"model", to_json(c.model)},
          {"sequence", seq},
          {"train", train},
          {"metrics", metrics},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir.string()}};
}

std::uint64_t ExperimentConfig::hash() const {
  json j = to_json(*this);
  j.erase("output_dir");
  const std::string s = j.dump();
  return fnv1a(std::as_bytes(std::span<const char>(s.data(), s.size())));
}

TaskSequence build_sequence(const ExperimentConfig& config, std::uint64_t seed) {
  const auto& sc = config.sequence;
  if (sc.external.empty()) {
    Rng rng(seed, 1);
    if (sc.n_tasks == 1) {
      // make_sequence wants two tasks; keep the first.
      TaskSequence seq = make_sequence(sc.category, 2, sc.params, rng);
      seq.tasks.resize(1);
      return seq;
    }
    return make_sequence(sc.category, sc.n_tasks, sc.params, rng);
  }
  TaskSequence seq;
  seq.category = sc.category;
  seq.seed = seed;
  for (std::size_t t = 0; t < sc.external.size(); ++t) {
    TaskSpec spec;
    spec.task_id = "task" + std::to_string(t);
    spec.alpha = sc.params.alpha.value_or(default_alpha(sc.category));
    spec.seq_len = sc.params.seq_len;
    spec.vocab_size = config.model.vocab_size;
    spec.n_classes = config.model.n_classes;
    spec.external = sc.external[t];
    seq.tasks.push_back(std::move(spec));
  }
  return seq;
}

ParameterSet build_init(const ExperimentConfig& config, std::uint64_t seed) {
  Rng rng(seed, 2);
  return init_model(config.model, rng);
}

}  // namespace forgetlab
