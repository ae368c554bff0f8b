#pragma once

// Checkpoint file: one line of JSON (format version, model config, RNG
// seed, named-array manifest with shapes and byte offsets) followed by
// raw little-endian 64-bit float arrays in manifest order.

#include <cstdint>
#include <string>

#include "advlab/model.hpp"

namespace advlab {

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params,
                     std::uint64_t seed);

/// Validates every array shape against the manifest and the config.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace advlab
