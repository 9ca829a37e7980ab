// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "forgetlab/config.hpp"
#include "forgetlab/error.hpp"

namespace forgetlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffU) << (8 * (7 - i));
    return r;
  }
  return v;
}

fs::path temp_sibling(const fs::path& target) {
  return target.parent_path() / (".tmp-" + target.filename().string());
}

json meta_json(const CheckpointMeta& m) {
  return {{"id", m.id},           {"sequence_id", m.sequence_id},          {"task_index", m.task_index},
          {"global_step", m.global_step}, {"epoch", m.epoch}, {"config_hash", hex64(m.config_hash)},
          {"seed", m.seed}};
}

}  // namespace

void write_f64(const fs::path& path, std::span<const double> values) {
  std::vector<std::uint64_t> raw(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) raw[i] = to_le(std::bit_cast<std::uint64_t>(values[i]));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 8));
  require(out.good(), ErrorCode::io, "short write to " + path.string());
}

std::vector<double> read_f64(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot read " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  require(size % 8 == 0, ErrorCode::data, path.string() + ": size is not a multiple of 8 bytes");
  in.seekg(0);
  std::vector<std::uint64_t> raw(size / 8);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::bit_cast<double>(to_le(raw[i]));
  return out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::io, "cannot write " + tmp.string());
    out << text;
    require(out.good(), ErrorCode::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt, const ModelConfig& config) {
  require(!fs::exists(dir), ErrorCode::io, "checkpoint " + dir.string() + " already exists");
  fs::create_directories(dir.parent_path());
  const fs::path tmp = temp_sibling(dir);
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  const std::size_t dim = ckpt.params.total_dim();
  require(ckpt.opt.m.size() == dim && ckpt.opt.v.size() == dim, ErrorCode::shape,
          "checkpoint " + ckpt.meta.id + ": optimizer state length differs from total_dim");
  json tensors = json::array();
  for (const auto& seg : ckpt.params.segments()) {
    const auto& key = seg.key;
    tensors.push_back({{"key", to_string(key)},
                       {"layer", key.layer},
                       {"component", to_string(key.component)},
                       {"name", key.name},
                       {"shape", ckpt.params.at(key).shape()},
                       {"offset", seg.offset * 8},
                       {"byte_length", seg.length * 8}});
  }
  json manifest = {{"format", "forgetlab-checkpoint"},
                   {"version", 1},
                   {"meta", meta_json(ckpt.meta)},
                   {"model", to_json(config)},
                   {"total_dim", dim},
                   {"dtype", "float64-le"},
                   {"tensors", tensors},
                   {"optimizer", {{"step", ckpt.opt.step}, {"m_offset", 0}, {"v_offset", dim * 8}}}};

  write_f64(tmp / "params.bin", flatten(ckpt.params));
  std::vector<double> opt(ckpt.opt.m);
  opt.insert(opt.end(), ckpt.opt.v.begin(), ckpt.opt.v.end());
  write_f64(tmp / "opt.bin", opt);
  {
    std::ofstream out(tmp / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
    require(out.good(), ErrorCode::io, "cannot write manifest of " + ckpt.meta.id);
  }
  fs::rename(tmp, dir);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::data, "missing checkpoint " + dir.filename().string());
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::data, dir.string() + "/manifest.json: " + e.what());
  }
  LoadedCheckpoint out;
  try {
    out.config = model_from_json(manifest.at("model"));
    const std::size_t dim = manifest.at("total_dim").get<std::size_t>();
    const auto flat = read_f64(dir / "params.bin");
    require(flat.size() == dim, ErrorCode::data, dir.string() + ": params.bin length differs from total_dim");
    ParameterSet params;
    for (const auto& t : manifest.at("tensors")) {
      const auto comp = component_from_string(t.at("component").get<std::string>());
      require(comp.has_value(), ErrorCode::data, "unknown component in " + dir.string());
      const ParamKey key{t.at("layer").get<int>(), *comp, t.at("name").get<std::string>()};
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t off = t.at("offset").get<std::size_t>() / 8;
      const std::size_t len = t.at("byte_length").get<std::size_t>() / 8;
      require(len == shape_size(shape) && off + len <= dim, ErrorCode::data,
              dir.string() + ": tensor " + to_string(key) + " extent is inconsistent");
      params.insert(key, Tensor(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                                           flat.begin() + static_cast<std::ptrdiff_t>(off + len))));
    }
    require(params.total_dim() == dim, ErrorCode::data, dir.string() + ": tensors do not tile total_dim");
    const auto opt = read_f64(dir / "opt.bin");
    require(opt.size() == 2 * dim, ErrorCode::data, dir.string() + ": opt.bin length differs from 2 * total_dim");
    out.checkpoint.params = std::move(params);
    out.checkpoint.opt.m.assign(opt.begin(), opt.begin() + static_cast<std::ptrdiff_t>(dim));
    out.checkpoint.opt.v.assign(opt.begin() + static_cast<std::ptrdiff_t>(dim), opt.end());
    out.checkpoint.opt.step = manifest.at("optimizer").at("step").get<std::size_t>();
    const json& m = manifest.at("meta");
    auto& meta = out.checkpoint.meta;
    meta.id = m.at("id").get<std::string>();
    meta.sequence_id = m.at("sequence_id").get<std::string>();
    meta.task_index = m.at("task_index").get<int>();
    meta.global_step = m.at("global_step").get<std::size_t>();
    meta.epoch = m.at("epoch").get<std::size_t>();
    meta.config_hash = std::stoull(m.at("config_hash").get<std::string>(), nullptr, 16);
    meta.seed = m.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::data, dir.string() + "/manifest.json: " + e.what());
  }
  return out;
}

void save_affine_map(const fs::path& checkpoint_dir, const AffineMap& map) {
  const std::string stem = "realign_" + std::to_string(map.layer);
  std::vector<double> payload(map.linear.data().begin(), map.linear.data().end());
  payload.insert(payload.end(), map.offset.begin(), map.offset.end());
  const fs::path bin = checkpoint_dir / (stem + ".bin");
  const fs::path tmp = temp_sibling(bin);
  write_f64(tmp, payload);
  fs::rename(tmp, bin);
  json side = {{"layer", map.layer},
               {"d", map.offset.size()},
               {"fit_residual", map.fit_residual},
               {"file", stem + ".bin"},
               {"layout", "linear row-major [d, d], then offset [d], float64-le"}};
  write_text_atomic(checkpoint_dir / (stem + ".json"), side.dump(2) + "\n");
}

AffineMap load_affine_map(const fs::path& checkpoint_dir, std::size_t layer) {
  const std::string stem = "realign_" + std::to_string(layer);
  const json side = json::parse(read_text(checkpoint_dir / (stem + ".json")));
  const std::size_t d = side.at("d").get<std::size_t>();
  const auto payload = read_f64(checkpoint_dir / (stem + ".bin"));
  require(payload.size() == d * d + d, ErrorCode::data, stem + ".bin has the wrong length");
  AffineMap map;
  map.layer = layer;
  map.fit_residual = side.at("fit_residual").get<double>();
  map.linear = Tensor({d, d}, std::vector<double>(payload.begin(), payload.begin() + static_cast<std::ptrdiff_t>(d * d)));
  map.offset.assign(payload.begin() + static_cast<std::ptrdiff_t>(d * d), payload.end());
  return map;
}

}  // namespace forgetlab
