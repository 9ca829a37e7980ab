// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "forgetlab/model.hpp"
#include "forgetlab/trainer.hpp"

namespace forgetlab {

/// Writes <dir>/{manifest.json, params.bin, opt.bin} through a temporary
/// sibling directory renamed into place. Existing checkpoints are never
/// overwritten.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint, const ModelConfig& config);

struct LoadedCheckpoint {
  Checkpoint checkpoint;
  ModelConfig config;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// realign_<layer>.bin (linear row-major, then offset) plus a JSON sidecar.
void save_affine_map(const std::filesystem::path& checkpoint_dir, const AffineMap& map);
AffineMap load_affine_map(const std::filesystem::path& checkpoint_dir, std::size_t layer);

/// Little-endian binary64 helpers.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path);

/// Whole-file write via temp + rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace forgetlab
