// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "forgetlab/checkpoint_io.hpp"
#include "forgetlab/config.hpp"
#include "forgetlab/error.hpp"
#include "support.hpp"

using namespace forgetlab;
using namespace forgetlab::testing;
using nlohmann::json;

namespace {

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

json minimal_config() {
  return json::parse(R"({
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 32,
              "max_seq_len": 8, "n_classes": 4},
    "sequence": {"category": "low", "n_tasks": 2, "n_train": 64, "n_val": 32, "n_test": 32},
    "train": {"epochs": 1, "batch_size": 16},
    "seeds": [1, 2],
    "output_dir": "out"
  })");
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

}  // namespace

TEST_CASE("minimal config parses with defaults", "[config]") {
  const ExperimentConfig c = parse_config(minimal_config());
  CHECK(c.model.d_model == 16);
  CHECK(c.sequence.params.seq_len == 8);
  CHECK(c.sequence.params.vocab_size == 32);
  CHECK(c.train.peak_lr == 3e-4);
  CHECK(c.train.beta2 == 0.95);
  CHECK(c.metrics.spectrum_k == 20);
  CHECK(c.metrics.spectrum_m == 60);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2});
}

TEST_CASE("config round-trips through JSON", "[config]") {
  json j = minimal_config();
  j["train"]["freeze"] = {"attention", "embed_out"};
  j["train"]["clip_norm"] = nullptr;
  j["train"]["curvature"] = {{"weight", 0.5}, {"n_directions", 2}, {"lanczos_iters", 4}};
  j["sequence"]["alpha"] = 0.05;
  const ExperimentConfig c = parse_config(j);
  CHECK_FALSE(c.train.clip_norm);
  CHECK(c.train.freeze.size() == 2);
  const ExperimentConfig back = parse_config(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.hash() == c.hash());
}

TEST_CASE("missing required field names its path", "[config]") {
  json j = minimal_config();
  j["model"].erase("d_model");
  const Failure f = failure_of([&] { (void)parse_config(j); });
  CHECK(f.code == ErrorCode::schema);
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("model.d_model"));
}

TEST_CASE("unknown keys and bad types are schema errors", "[config]") {
  json unknown = minimal_config();
  unknown["train"]["learning_rate"] = 0.1;
  Failure f = failure_of([&] { (void)parse_config(unknown); });
  CHECK(f.code == ErrorCode::schema);
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("train.learning_rate"));

  json typed = minimal_config();
  typed["train"]["batch_size"] = "sixteen";
  f = failure_of([&] { (void)parse_config(typed); });
  CHECK(f.code == ErrorCode::schema);
  CHECK_THAT(f.message, Catch::Matchers::ContainsSubstring("train.batch_size"));

  json negative = minimal_config();
  negative["model"]["n_heads"] = -2;
  CHECK(failure_of([&] { (void)parse_config(negative); }).code == ErrorCode::schema);

  json group = minimal_config();
  group["train"]["freeze"] = {"everything"};
  CHECK_THAT(failure_of([&] { (void)parse_config(group); }).message,
             Catch::Matchers::ContainsSubstring("train.freeze[0]"));
}

TEST_CASE("semantic violations are schema errors", "[config]") {
  json heads = minimal_config();
  heads["model"]["n_heads"] = 3;
  CHECK(failure_of([&] { (void)parse_config(heads); }).code == ErrorCode::schema);

  json band = minimal_config();
  band["sequence"]["alpha"] = 0.5;
  CHECK_THAT(failure_of([&] { (void)parse_config(band); }).message, Catch::Matchers::ContainsSubstring("sequence.alpha"));

  json seeds = minimal_config();
  seeds["seeds"] = json::array();
  CHECK(failure_of([&] { (void)parse_config(seeds); }).code == ErrorCode::schema);

  json lr = minimal_config();
  lr["train"]["peak_lr"] = 0.0;
  CHECK(failure_of([&] { (void)parse_config(lr); }).code == ErrorCode::schema);

  json spectrum = minimal_config();
  spectrum["metrics"] = {{"spectrum_k", 10}, {"spectrum_m", 5}};
  CHECK(failure_of([&] { (void)parse_config(spectrum); }).code == ErrorCode::schema);

  json category = minimal_config();
  category["sequence"]["category"] = "extreme";
  CHECK(failure_of([&] { (void)parse_config(category); }).code == ErrorCode::schema);
}

TEST_CASE("load_config reports bad files", "[config]") {
  TempDir dir("cfg");
  write_text(dir / "bad.json", "{\"model\": ");
  CHECK(failure_of([&] { (void)load_config(dir / "bad.json"); }).code == ErrorCode::schema);
  CHECK(failure_of([&] { (void)load_config(dir / "absent.json"); }).code == ErrorCode::io);
  write_text(dir / "ok.json", minimal_config().dump());
  CHECK(load_config(dir / "ok.json").model.n_layers == 2);
}

TEST_CASE("config hash ignores output_dir only", "[config]") {
  ExperimentConfig a = parse_config(minimal_config());
  ExperimentConfig b = a;
  b.output_dir = "elsewhere";
  CHECK(a.hash() == b.hash());
  b.train.peak_lr = 1e-3;
  CHECK(a.hash() != b.hash());
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("build_init and build_sequence are seeded", "[config]") {
  const ExperimentConfig c = parse_config(minimal_config());
  CHECK(build_init(c, 3) == build_init(c, 3));
  CHECK_FALSE(build_init(c, 3) == build_init(c, 4));
  const TaskSequence s = build_sequence(c, 3);
  CHECK(s.size() == 2);
  CHECK(s.tasks[0].teacher == build_sequence(c, 3).tasks[0].teacher);
  ExperimentConfig one = c;
  one.sequence.n_tasks = 1;
  CHECK(build_sequence(one, 3).size() == 1);
}

TEST_CASE("external JSONL tasks feed the sequence", "[config][jsonl]") {
  TempDir dir("ext");
  std::string train, held;
  for (int i = 0; i < 20; ++i)
    train += "{\"tokens\":[" + std::to_string(i % 32) + ",1,2,3],\"label\":" + std::to_string(i % 4) + "}\n";
  for (int i = 0; i < 6; ++i) held += "{\"tokens\":[4,5,6," + std::to_string(i) + "],\"label\":" + std::to_string(i % 4) + "}\n";
  write_text(dir / "train.jsonl", train);
  write_text(dir / "held.jsonl", held);
  json j = minimal_config();
  j["sequence"]["n_tasks"] = 1;
  const json entry = {{"train", (dir / "train.jsonl").string()},
                      {"val", (dir / "held.jsonl").string()},
                      {"test", (dir / "held.jsonl").string()}};
  j["sequence"]["external"] = json::array({entry});
  const ExperimentConfig c = parse_config(j);
  const TaskSequence s = build_sequence(c, 1);
  REQUIRE(s.size() == 1);
  const TaskData d = TaskData::generate(s.tasks[0]);
  CHECK(d.train.size() == 20);
  CHECK(d.val.size() == 6);
  CHECK(d.train.labels[5] == 1);
  CHECK(d.test.tokens[3] == 0);

  j["sequence"]["n_tasks"] = 2;
  CHECK(failure_of([&] { (void)parse_config(j); }).code == ErrorCode::schema);
}

TEST_CASE("binary64 payloads are little-endian and exact", "[io]") {
  TempDir dir("f64");
  const std::vector<double> v{1.0, -0.0, std::numeric_limits<double>::denorm_min(), 1e308, -3.25,
                              std::numeric_limits<double>::infinity()};
  write_f64(dir / "v.bin", v);
  const std::vector<double> back = read_f64(dir / "v.bin");
  REQUIRE(back.size() == v.size());
  CHECK(std::memcmp(back.data(), v.data(), v.size() * sizeof(double)) == 0);
  const std::string bytes = slurp(dir / "v.bin");
  REQUIRE(bytes.size() == 8 * v.size());
  // 1.0 is 0x3ff0000000000000.
  CHECK(static_cast<unsigned char>(bytes[6]) == 0xf0);
  CHECK(static_cast<unsigned char>(bytes[7]) == 0x3f);
  write_text(dir / "odd.bin", "abc");
  CHECK_THROWS_AS(read_f64(dir / "odd.bin"), Error);
}

TEST_CASE("checkpoint save and load round-trip bit-exactly", "[io][checkpoint]") {
  TempDir dir("ckpt");
  ModelConfig cfg = tiny_model(2, 8, 2);
  cfg.moe = MoeConfig{4, 2};
  Rng rng(5);
  Checkpoint c{init_model(cfg, rng), OptimizerState::zeros(0), {}};
  const std::size_t dim = c.params.total_dim();
  c.opt = OptimizerState::zeros(dim);
  for (auto& x : c.opt.m) x = rng.normal();
  for (auto& x : c.opt.v) x = rng.uniform();
  c.opt.step = 17;
  c.meta = {"t1_s40", "low-00000000000000ab", 1, 40, 2, 0xdeadbeefULL, 9};
  save_checkpoint(dir / "t1_s40", c, cfg);
  CHECK(std::filesystem::exists(dir / "t1_s40" / "manifest.json"));
  CHECK(std::filesystem::file_size(dir / "t1_s40" / "params.bin") == 8 * dim);
  CHECK(std::filesystem::file_size(dir / "t1_s40" / "opt.bin") == 16 * dim);
  const LoadedCheckpoint l = load_checkpoint(dir / "t1_s40");
  CHECK(l.checkpoint == c);
  CHECK(l.config == cfg);
  CHECK_THROWS_AS(save_checkpoint(dir / "t1_s40", c, cfg), Error);
}

TEST_CASE("damaged checkpoints fail to load", "[io][checkpoint]") {
  TempDir dir("ckpt");
  const ModelConfig cfg = tiny_model(1, 8, 2);
  Rng rng(6);
  const ParameterSet p = init_model(cfg, rng);
  save_checkpoint(dir / "c", {p, OptimizerState::zeros(p.total_dim()), {}}, cfg);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), Error);
  std::filesystem::resize_file(dir / "c" / "params.bin", 8 * (p.total_dim() - 1));
  CHECK_THROWS_AS(load_checkpoint(dir / "c"), Error);
}

TEST_CASE("affine maps round-trip through the checkpoint dir", "[io][affine]") {
  TempDir dir("map");
  Rng rng(7);
  AffineMap m;
  m.layer = 3;
  m.linear = random_tensor(6, 6, rng);
  for (int i = 0; i < 6; ++i) m.offset.push_back(rng.normal());
  m.fit_residual = 0.125;
  save_affine_map(dir.path(), m);
  CHECK(std::filesystem::exists(dir / "realign_3.bin"));
  const AffineMap back = load_affine_map(dir.path(), 3);
  CHECK(back.linear == m.linear);
  CHECK(back.offset == m.offset);
  CHECK(back.layer == 3);
  CHECK(back.fit_residual == 0.125);
  CHECK_THROWS_AS(load_affine_map(dir.path(), 1), Error);
}

TEST_CASE("atomic text write replaces whole files", "[io]") {
  TempDir dir("txt");
  write_text_atomic(dir / "a.txt", "first");
  write_text_atomic(dir / "a.txt", "second");
  CHECK(read_text(dir / "a.txt") == "second");
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++entries;
  CHECK(entries == 1);
}
