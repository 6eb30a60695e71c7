#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vqnerv/compression.hpp"
#include "vqnerv/model.hpp"

namespace vqnerv {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'Q', 'N', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

using PruneMasks = std::vector<std::pair<std::string, std::vector<std::uint8_t>>>;

struct CheckpointMeta {
  std::string run_config;  // echo of the run configuration
  std::uint64_t seed = 0;
  int epoch = 0;
  double best_psnr = 0.0;
};

// Snapshot of parameter values and codebook state, restorable in memory.
struct ModelState {
  std::vector<std::pair<std::string, Tensor>> params;
  CodebookState codebook;
  FeaturePool pool;
};
ModelState capture(const Model& model);
void restore(Model& model, const ModelState& state);

Bytes serialize_checkpoint(const Model& model, const CheckpointMeta& meta,
                           const PruneMasks& masks = {});
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointMeta& meta, const PruneMasks& masks = {});

struct LoadedCheckpoint {
  ModelConfig model_config;
  CheckpointMeta meta;
  PruneMasks masks;
  ModelState state;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace vqnerv
