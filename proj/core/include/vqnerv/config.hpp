#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vqnerv/losses.hpp"
#include "vqnerv/model.hpp"
#include "vqnerv/optim.hpp"

namespace vqnerv {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// `key = value` lines; '#' starts a comment. Throws ConfigError with the line
// number on malformed input.
KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::filesystem::path& path);
// "key=value" as given on the command line.
std::pair<std::string, std::string> parse_override(std::string_view text);

// Returns false when `key` is not a model key.
bool apply_model_key(ModelConfig& config, const std::string& key, const std::string& value);
std::string echo(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view text);

enum class Task { kRegress, kInpaint, kInterpolate };
std::string to_string(Task task);

enum class MaskKind { kBox, kDisperse };
std::string to_string(MaskKind kind);

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  AdamSettings adam;
  Task task = Task::kRegress;
  int epochs = 300;
  int eval_every = 1;

  std::string data_dir;  // empty selects the synthetic video
  int synthetic_frames = 8;
  std::uint64_t synthetic_seed = 42;
  int crop_height = 0;
  int crop_width = 0;
  int raw_height = 0;  // > 0 reads .rgb planar frames of this size
  int raw_width = 0;

  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";

  float prune_ratio = 0.1f;
  int finetune_epochs = -1;  // -1: 10% of epochs

  MaskKind mask_kind = MaskKind::kBox;
  int mask_boxes = 5;
  int mask_width = 0;  // 0 scales 50 px at 1920 columns to the frame width
  float disperse_fraction = 0.1f;
  std::uint64_t mask_seed = 7;

  std::vector<double> rd_budgets{0.1e6, 0.3e6};
  bool save_frames = false;

  int resolved_finetune_epochs() const;
};

// Throws ConfigError on unknown keys or unparsable values.
void apply_key(RunConfig& config, const std::string& key, const std::string& value);
void validate(const RunConfig& config);
std::string echo(const RunConfig& config);
RunConfig parse_run_config(std::string_view text);
// Defaults, then the file (if any), then overrides in order; validated.
RunConfig load_run_config(const std::filesystem::path& file, const KeyValues& overrides);

}  // namespace vqnerv
