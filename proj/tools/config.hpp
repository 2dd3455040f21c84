#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "mshift/dataset.hpp"
#include "mshift/model.hpp"
#include "mshift/trainer.hpp"

namespace mshift::cli {

/// One experiment: where the data comes from, the model, the training
/// hyperparameters and where outputs go.
///
/// Seeds: `train.seed` is the root seed. The model seed and the synthetic
/// data seed default to it when the config does not set them explicitly, so
/// a --seed override reseeds the whole run.
struct RunConfig {
  std::string label;
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::filesystem::path> vectors;
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path output_dir = "run";
  bool emit_embeddings = false;

  bool label_explicit = false;
  bool model_seed_explicit = false;
  bool data_seed_explicit = false;
};

/// Parses a run config document. Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Accepts either a run config (uses dataset.synthetic) or a bare synthetic
/// spec object.
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

/// Applies --seed: root seed plus every seed not set explicitly.
void override_seed(RunConfig& cfg, std::uint64_t seed);

/// Applies --ablation; a label derived from the ablation follows it.
void override_ablation(RunConfig& cfg, const std::string& name);

/// Loads or generates the run's data.
DatasetBundle load_dataset(const RunConfig& cfg);

/// Fills model dims from the data.
ModelConfig resolved_model(const RunConfig& cfg, const DatasetBundle& data);

/// Canonical JSON echo of the effective config (stored in checkpoints).
std::string run_config_json(const RunConfig& cfg);

}  // namespace mshift::cli
