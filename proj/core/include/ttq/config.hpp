#pragma once

// Run configuration (JSON). See docs/formats.md for the grammar.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ttq/dataset.hpp"
#include "ttq/distill.hpp"
#include "ttq/model.hpp"
#include "ttq/train.hpp"

namespace ttq::config {

std::uint64_t fnv1a64(std::string_view bytes);

/// Canonical JSON text (fixed key order, no whitespace).
std::string model_config_to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(std::string_view text);
std::uint64_t config_digest(const model::ModelConfig& c);

struct BenchConfig {
  /// (rows, cols) of the layers to time.
  std::vector<std::pair<std::size_t, std::size_t>> shapes{{768, 768}, {768, 3072}};
  std::size_t rank = 10;
  std::size_t order = 2;
  std::size_t repetitions = 20;
  std::size_t batch = 1;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "out";
  /// Dataset directory in the line format; generated from `synthetic` when `generate` is set
  /// and the directory has no meta.json yet.
  std::filesystem::path data_dir = "data";
  bool generate = false;
  data::SyntheticSpec synthetic;
  model::ModelConfig model;
  train::TrainConfig train;
  distill::DistillConfig distill;
  /// Dense teacher for `distill`; trained with `train` settings when empty.
  std::filesystem::path teacher_checkpoint;
  BenchConfig bench;
  /// Tokens per forward pass for report-flops.
  std::size_t flops_seq_len = 128;
};

/// `base_dir` resolves relative paths. Unknown keys are rejected with ConfigError.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
/// Reads the file and applies the TTQ_SEED environment override.
RunConfig load_run_config(const std::filesystem::path& path);
/// Sets every seed field (model, train, distill, synthetic) to `seed`.
void apply_seed(RunConfig& c, std::uint64_t seed);
/// Applies TTQ_SEED when set; ConfigError when it is not an unsigned integer.
void apply_env_seed(RunConfig& c);

std::string run_config_to_json(const RunConfig& c);

/// Writes <dir>/manifest.json: command, config digest, seed, library version and artifacts.
void write_manifest(const std::filesystem::path& dir, const RunConfig& c, const std::string& command,
                    const std::vector<std::string>& artifacts);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ttq::config
