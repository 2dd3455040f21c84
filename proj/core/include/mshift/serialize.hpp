#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mshift/eval.hpp"
#include "mshift/model.hpp"
#include "mshift/trainer.hpp"

namespace mshift {

/// Checkpoint file: one JSON object
///   {"format":"mshift-checkpoint","version":1,"model":{...},"config":{...},
///    "params":{"<id>":{"shape":[r,c],"values":[...]}, ...}}
/// with values at 17 significant digits. `config_json` is echoed verbatim
/// (must be a JSON value; "null" when empty).
void save_checkpoint(const DaNet& net, const std::filesystem::path& path,
                     const std::string& config_json = "null");

/// Rebuilds the model from the checkpoint's model section, then loads every
/// tensor, checking shape for shape. The config echo goes to `config_json`.
DaNet load_checkpoint(const std::filesystem::path& path, std::string* config_json = nullptr);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

std::string trainlog_json(const TrainLog& log);

std::string evalreport_json(const EvalReport& report, const std::string& label, std::uint64_t seed);

/// The fields the comparison report needs from an evalreport.json.
struct EvalSummary {
  std::string label;
  std::uint64_t seed = 0;
  double target_accuracy = 0.0;
  double target_macro_f1 = 0.0;
  double confusion_gap = 0.0;
};

EvalSummary parse_evalreport(const std::string& text);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace mshift
