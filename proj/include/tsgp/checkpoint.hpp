#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "tsgp/model.hpp"

namespace tsgp {

// File layout:
//   "TSGP-CHECKPOINT 1\n"
//   "<header byte length> <FNV-1a 64 of the header bytes, 16 hex digits>\n"
//   <header: JSON object>"\n"
//   <tensor payloads: little-endian float32, row-major, in header order>
// The header records kind ("model" or "adamw"), model config, vocabulary token list and hash,
// creation seed, trained dimensionalities, step, and per-tensor name, shape and payload FNV-1a 64.

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::vector<int> dims;  // archive dimensionalities seen in training
  std::int64_t step = 0;
};

struct Checkpoint {
  ModelParams<float> params;
  CheckpointMeta meta;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, const CheckpointMeta& meta);
/// Refuses (throws) on any magic, header hash, vocabulary, config, shape or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_optimizer(const std::filesystem::path& path, const AdamWState<float>& state, const ModelConfig& cfg);
AdamWState<float> load_optimizer(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace tsgp
