#include "config.hpp"

#include <set>

#include <fmt/format.h>

#include "json.hpp"
#include "mshift/error.hpp"
#include "mshift/serialize.hpp"

namespace mshift::cli {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed, const char* where) {
  if (!obj.is_object()) throw ConfigError(fmt::format("'{}' must be an object", where));
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) throw ConfigError(fmt::format("unknown key '{}' in '{}'", key, where));
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end()) out = it->get<T>();
}

DomainShift shift_from_json(const json& j) {
  check_keys(j, {"rotations", "scale", "translation"}, "domain_shift[]");
  DomainShift s;
  read(j, "rotations", s.rotations);
  read(j, "scale", s.scale);
  read(j, "translation", s.translation);
  return s;
}

SyntheticSpec synthetic_from_json(const json& j, bool& seed_explicit) {
  check_keys(j, {"num_sources", "num_classes", "dim", "samples_per_class", "domain_shift",
                 "class_separation", "noise_sigma", "seed", "class_priors"},
             "synthetic");
  SyntheticSpec s;
  read(j, "num_sources", s.num_sources);
  read(j, "num_classes", s.num_classes);
  read(j, "dim", s.dim);
  read(j, "samples_per_class", s.samples_per_class);
  read(j, "class_separation", s.class_separation);
  read(j, "noise_sigma", s.noise_sigma);
  read(j, "class_priors", s.class_priors);
  seed_explicit = j.contains("seed");
  read(j, "seed", s.seed);
  if (auto it = j.find("domain_shift"); it != j.end()) {
    for (const auto& entry : *it) s.domain_shift.push_back(shift_from_json(entry));
  }
  return s;
}

json synthetic_to_json(const SyntheticSpec& s) {
  json shifts = json::array();
  for (const auto& d : s.domain_shift) {
    shifts.push_back({{"rotations", d.rotations}, {"scale", d.scale}, {"translation", d.translation}});
  }
  return {{"num_sources", s.num_sources},   {"num_classes", s.num_classes},
          {"dim", s.dim},                   {"samples_per_class", s.samples_per_class},
          {"domain_shift", shifts},         {"class_separation", s.class_separation},
          {"noise_sigma", s.noise_sigma},   {"seed", s.seed},
          {"class_priors", s.class_priors}};
}

void model_from_json(const json& j, ModelConfig& m, bool& seed_explicit) {
  check_keys(j, {"encoder_widths", "disentangler_width", "adaptor_width", "dropout_rate", "activation", "seed"},
             "model");
  read(j, "encoder_widths", m.encoder_widths);
  read(j, "disentangler_width", m.disentangler_width);
  read(j, "adaptor_width", m.adaptor_width);
  read(j, "dropout_rate", m.dropout_rate);
  if (auto it = j.find("activation"); it != j.end()) m.activation = parse_activation(it->get<std::string>());
  seed_explicit = j.contains("seed");
  read(j, "seed", m.seed);
}

void train_from_json(const json& j, TrainConfig& t) {
  check_keys(j, {"tau", "eta", "gamma", "lr_encoder", "lr_heads", "batch_size", "epochs", "seed",
                 "shrinkage", "alpha_subsample", "ablation", "pseudo_confidence_threshold",
                 "deterministic", "optimizer", "adam_beta1", "adam_beta2", "adam_epsilon",
                 "min_class_count", "validation_fraction", "verify_freezing", "kernel"},
             "train");
  read(j, "tau", t.tau);
  read(j, "eta", t.eta);
  read(j, "gamma", t.gamma);
  read(j, "lr_encoder", t.lr_encoder);
  read(j, "lr_heads", t.lr_heads);
  read(j, "batch_size", t.batch_size);
  read(j, "epochs", t.epochs);
  read(j, "seed", t.seed);
  read(j, "shrinkage", t.shrinkage);
  read(j, "alpha_subsample", t.alpha_subsample);
  if (auto it = j.find("ablation"); it != j.end()) t.ablation = parse_ablation(it->get<std::string>());
  if (auto it = j.find("pseudo_confidence_threshold"); it != j.end() && !it->is_null()) {
    t.pseudo_confidence_threshold = it->get<double>();
  }
  read(j, "deterministic", t.deterministic);
  if (auto it = j.find("optimizer"); it != j.end()) {
    const auto name = it->get<std::string>();
    if (name == "sgd") {
      t.optimizer = OptimizerKind::sgd;
    } else if (name == "adam") {
      t.optimizer = OptimizerKind::adam;
    } else {
      throw ConfigError(fmt::format("unknown optimizer '{}' (expected sgd|adam)", name));
    }
  }
  read(j, "adam_beta1", t.adam_beta1);
  read(j, "adam_beta2", t.adam_beta2);
  read(j, "adam_epsilon", t.adam_epsilon);
  read(j, "min_class_count", t.min_class_count);
  read(j, "validation_fraction", t.validation_fraction);
  read(j, "verify_freezing", t.verify_freezing);
  if (auto it = j.find("kernel"); it != j.end()) {
    if (it->is_string() && it->get<std::string>() == "median") {
      t.kernel = KernelConfig::median();
    } else if (it->is_object() && it->contains("fixed")) {
      t.kernel = KernelConfig::fixed(it->at("fixed").get<double>());
    } else {
      throw ConfigError("kernel must be \"median\" or {\"fixed\": sigma}");
    }
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("config is not valid JSON: {}", e.what()));
  }
  RunConfig cfg;
  try {
    check_keys(doc, {"label", "dataset", "model", "train", "output_dir", "emit_embeddings"}, "run config");
    const json& dataset = doc.at("dataset");
    check_keys(dataset, {"synthetic", "path"}, "dataset");
    if (dataset.contains("synthetic") == dataset.contains("path")) {
      throw ConfigError("dataset needs exactly one of 'synthetic' or 'path'");
    }
    if (dataset.contains("synthetic")) {
      cfg.synthetic = synthetic_from_json(dataset.at("synthetic"), cfg.data_seed_explicit);
    } else {
      std::filesystem::path p = dataset.at("path").get<std::string>();
      cfg.vectors = (p.is_relative() ? base_dir / p : p).lexically_normal();
    }
    if (auto it = doc.find("model"); it != doc.end()) model_from_json(*it, cfg.model, cfg.model_seed_explicit);
    if (auto it = doc.find("train"); it != doc.end()) train_from_json(*it, cfg.train);
    read(doc, "label", cfg.label);
    cfg.label_explicit = !cfg.label.empty();
    if (auto it = doc.find("output_dir"); it != doc.end()) {
      std::filesystem::path p = it->get<std::string>();
      cfg.output_dir = (p.is_relative() ? base_dir / p : p).lexically_normal();
    } else {
      cfg.output_dir = base_dir / "run";
    }
    read(doc, "emit_embeddings", cfg.emit_embeddings);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config: {}", e.what()));
  }
  if (cfg.label.empty()) cfg.label = to_string(cfg.train.ablation);
  override_seed(cfg, cfg.train.seed);
  validate(cfg.train);
  if (cfg.synthetic) validate_spec(*cfg.synthetic);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_text(path), path.parent_path());
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("config is not valid JSON: {}", e.what()));
  }
  if (doc.contains("dataset")) {
    const RunConfig cfg = parse_run_config(text, path.parent_path());
    if (!cfg.synthetic) throw ConfigError("config dataset is a file path, not a synthetic spec");
    return *cfg.synthetic;
  }
  bool seed_explicit = false;
  try {
    SyntheticSpec spec = synthetic_from_json(doc, seed_explicit);
    validate_spec(spec);
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("synthetic spec: {}", e.what()));
  }
}

void override_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.train.seed = seed;
  if (!cfg.model_seed_explicit) cfg.model.seed = seed;
  if (cfg.synthetic && !cfg.data_seed_explicit) cfg.synthetic->seed = seed;
}

void override_ablation(RunConfig& cfg, const std::string& name) {
  cfg.train.ablation = parse_ablation(name);
  if (!cfg.label_explicit) cfg.label = to_string(cfg.train.ablation);
}

DatasetBundle load_dataset(const RunConfig& cfg) {
  if (cfg.synthetic) return generate_synthetic(*cfg.synthetic);
  return load_vectors(*cfg.vectors);
}

ModelConfig resolved_model(const RunConfig& cfg, const DatasetBundle& data) {
  ModelConfig m = cfg.model;
  m.input_dim = data.dim;
  m.num_classes = data.num_classes;
  m.num_sources = data.num_sources();
  return m;
}

std::string run_config_json(const RunConfig& cfg) {
  json dataset;
  if (cfg.synthetic) {
    dataset["synthetic"] = synthetic_to_json(*cfg.synthetic);
  } else {
    dataset["path"] = cfg.vectors->generic_string();
  }
  const TrainConfig& t = cfg.train;
  json kernel = t.kernel.mode == KernelConfig::Mode::median_heuristic ? json("median")
                                                                      : json{{"fixed", t.kernel.sigma}};
  json train{{"tau", t.tau},
             {"eta", t.eta},
             {"gamma", t.gamma},
             {"lr_encoder", t.lr_encoder},
             {"lr_heads", t.lr_heads},
             {"batch_size", t.batch_size},
             {"epochs", t.epochs},
             {"seed", t.seed},
             {"shrinkage", t.shrinkage},
             {"alpha_subsample", t.alpha_subsample},
             {"ablation", to_string(t.ablation)},
             {"pseudo_confidence_threshold",
              t.pseudo_confidence_threshold ? json(*t.pseudo_confidence_threshold) : json(nullptr)},
             {"deterministic", t.deterministic},
             {"optimizer", t.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
             {"adam_beta1", t.adam_beta1},
             {"adam_beta2", t.adam_beta2},
             {"adam_epsilon", t.adam_epsilon},
             {"min_class_count", t.min_class_count},
             {"validation_fraction", t.validation_fraction},
             {"verify_freezing", t.verify_freezing},
             {"kernel", kernel}};
  json model{{"encoder_widths", cfg.model.encoder_widths},
             {"disentangler_width", cfg.model.disentangler_width},
             {"adaptor_width", cfg.model.adaptor_width},
             {"dropout_rate", cfg.model.dropout_rate},
             {"activation", to_string(cfg.model.activation)},
             {"seed", cfg.model.seed}};
  return json{{"label", cfg.label},
              {"dataset", dataset},
              {"model", model},
              {"train", train},
              {"emit_embeddings", cfg.emit_embeddings}}
      .dump();
}

}  // namespace mshift::cli
