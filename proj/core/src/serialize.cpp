#include "mshift/serialize.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "mshift/error.hpp"

namespace mshift {

namespace {

using nlohmann::json;

json matrix_json(const Tensor2& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      row.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_json(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(std::isfinite(x) ? json(x) : json(nullptr));
  return out;
}

json model_json(const ModelConfig& c) {
  return json{{"input_dim", c.input_dim},
              {"encoder_widths", c.encoder_widths},
              {"disentangler_width", c.disentangler_width},
              {"adaptor_width", c.adaptor_width},
              {"num_classes", c.num_classes},
              {"num_sources", c.num_sources},
              {"dropout_rate", c.dropout_rate},
              {"activation", to_string(c.activation)},
              {"seed", c.seed}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
  c.disentangler_width = j.at("disentangler_width").get<int>();
  c.adaptor_width = j.at("adaptor_width").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.num_sources = j.at("num_sources").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out << text;
  out.flush();
  if (!out) throw IoError(fmt::format("failed while writing '{}'", path.string()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string model_config_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("bad model config: {}", e.what()));
  }
}

void save_checkpoint(const DaNet& net, const std::filesystem::path& path,
                     const std::string& config_json) {
  std::ostringstream out;
  out << "{\"format\":\"mshift-checkpoint\",\"version\":1,\"model\":" << model_json(net.config()).dump()
      << ",\"config\":" << (config_json.empty() ? "null" : config_json) << ",\"params\":{";
  bool first = true;
  for (const ParamTensor* p : net.params()) {
    if (!first) out << ',';
    first = false;
    out << json(p->id).dump() << ":{\"shape\":[" << p->value.rows() << ',' << p->value.cols()
        << "],\"values\":[";
    for (Index k = 0; k < p->value.size(); ++k) {
      if (k > 0) out << ',';
      out << fmt::format("{:.17g}", p->value.data()[k]);
    }
    out << "]}";
  }
  out << "}}\n";
  write_text(path, out.str());
}

DaNet load_checkpoint(const std::filesystem::path& path, std::string* config_json) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: malformed checkpoint: {}", path.string(), e.what()));
  }
  try {
    if (doc.value("format", std::string{}) != "mshift-checkpoint") {
      throw SchemaError(fmt::format("{}: not an mshift checkpoint", path.string()));
    }
    DaNet net(model_from_json(doc.at("model")));
    const json& params = doc.at("params");
    if (params.size() != net.params().size()) {
      throw SchemaError(fmt::format("{}: checkpoint has {} tensors, model expects {}", path.string(),
                                    params.size(), net.params().size()));
    }
    for (ParamTensor* p : net.params()) {
      const json& entry = params.at(p->id);
      const auto shape = entry.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2 || shape[0] != p->value.rows() || shape[1] != p->value.cols()) {
        throw SchemaError(fmt::format("{}: tensor '{}' has shape {} in the checkpoint, model expects {}",
                                      path.string(), p->id, entry.at("shape").dump(),
                                      shape_string(p->value)));
      }
      const auto values = entry.at("values").get<std::vector<double>>();
      if (static_cast<Index>(values.size()) != p->value.size()) {
        throw SchemaError(fmt::format("{}: tensor '{}' has {} values, expected {}", path.string(),
                                      p->id, values.size(), p->value.size()));
      }
      std::copy(values.begin(), values.end(), p->value.data());
      p->zero_grad();
    }
    if (config_json != nullptr) *config_json = doc.at("config").dump();
    return net;
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string trainlog_json(const TrainLog& log) {
  json epochs = json::array();
  for (const EpochRecord& r : log.epochs) {
    json e{{"epoch", r.epoch},
           {"phase", r.phase},
           {"steps", r.steps},
           {"ce", r.ce},
           {"source_accuracy", vector_json(r.source_accuracy)},
           {"cross_branch_accuracy", matrix_json(r.cross_branch_accuracy)},
           {"target_accuracy", r.target_accuracy},
           {"target_macro_f1", r.target_macro_f1},
           {"classwise_mmd", vector_json(r.classwise_mmd)},
           {"alpha", matrix_json(r.alpha)}};
    if (r.fcd) e["fcd"] = *r.fcd;
    if (r.cpa) e["cpa"] = *r.cpa;
    epochs.push_back(std::move(e));
  }
  return json{{"format", "mshift-trainlog"}, {"version", 1}, {"epochs", epochs}}.dump(2) + "\n";
}

std::string evalreport_json(const EvalReport& report, const std::string& label, std::uint64_t seed) {
  json j{{"format", "mshift-evalreport"},
         {"version", 1},
         {"label", label},
         {"seed", seed},
         {"target_accuracy", report.target_accuracy},
         {"target_macro_f1", report.target_macro_f1},
         {"per_class_f1", vector_json(report.per_class_f1)},
         {"branch_confusion", matrix_json(report.branch_confusion)},
         {"confusion_gap", report.confusion_gap()},
         {"classwise_mmd", matrix_json(report.classwise_mmd)},
         {"weight_mean", vector_json(report.weight_mean)},
         {"weight_std", vector_json(report.weight_std)}};
  return j.dump(2) + "\n";
}

EvalSummary parse_evalreport(const std::string& text) {
  try {
    const json j = json::parse(text);
    EvalSummary s;
    s.label = j.at("label").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.target_accuracy = j.at("target_accuracy").get<double>();
    s.target_macro_f1 = j.at("target_macro_f1").get<double>();
    s.confusion_gap = j.at("confusion_gap").get<double>();
    return s;
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("bad evalreport: {}", e.what()));
  }
}

}  // namespace mshift
