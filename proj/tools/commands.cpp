#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "config.hpp"
#include "mshift/error.hpp"
#include "mshift/eval.hpp"
#include "mshift/gradcheck_suite.hpp"
#include "mshift/serialize.hpp"
#include "mshift/trainer.hpp"

namespace mshift::cli {

namespace fs = std::filesystem;

const char* const report_header =
    "label,runs,target_accuracy_mean,target_accuracy_std,target_macro_f1_mean,target_macro_f1_std,"
    "confusion_gap_mean,confusion_gap_std";

namespace {

bool is_input_error(const std::exception& e) {
  return dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
         dynamic_cast<const SchemaError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
         dynamic_cast<const IoError*>(&e);
}

// Loading stage: every failure is a config error.
template <typename Fn>
int load_stage(Console io, Fn&& fn) {
  try {
    fn();
    return exit_ok;
  } catch (const std::exception& e) {
    fmt::print(io.err, "error: {}\n", e.what());
    return exit_config_error;
  }
}

RunConfig resolve_config(const RunOptions& options) {
  RunConfig cfg = load_run_config(options.config);
  if (options.seed) override_seed(cfg, *options.seed);
  if (options.ablation) override_ablation(cfg, *options.ablation);
  if (options.out) cfg.output_dir = *options.out;
  validate(cfg.train);
  return cfg;
}

void print_summary(Console io, const RunConfig& cfg, const EvalReport& report) {
  fmt::print(io.out, "{} seed={} target_accuracy={:.4f} target_macro_f1={:.4f} confusion_gap={:.4f}\n",
             cfg.label, cfg.train.seed, report.target_accuracy, report.target_macro_f1,
             report.confusion_gap());
}

struct Aggregate {
  std::vector<double> accuracy;
  std::vector<double> macro_f1;
  std::vector<double> gap;
};

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

int cmd_gen_data(const fs::path& config, const fs::path& out, std::optional<std::uint64_t> seed,
                 Console io) {
  SyntheticSpec spec;
  DatasetBundle data;
  if (int rc = load_stage(io, [&] {
        spec = load_synthetic_spec(config);
        if (seed) spec.seed = *seed;
        data = generate_synthetic(spec);
      });
      rc != exit_ok) {
    return rc;
  }
  try {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_vectors(data, out);
  } catch (const std::exception& e) {
    fmt::print(io.err, "error: {}\n", e.what());
    return exit_runtime_abort;
  }
  fmt::print(io.out, "wrote {}: M={} K={} d={}\n", out.string(), data.num_sources(), data.num_classes, data.dim);
  for (int i = 0; i < data.num_sources(); ++i) {
    fmt::print(io.out, "  {} (source): {} samples\n", data.domain_names[i], data.sources[i].size());
  }
  fmt::print(io.out, "  {} (target): {} train, {} test\n", data.domain_names.back(), data.target_train.size(),
             data.target_test.size());
  return exit_ok;
}

int cmd_train(const RunOptions& options, Console io) {
  RunConfig cfg;
  DatasetBundle data;
  ModelConfig model;
  if (int rc = load_stage(io, [&] {
        cfg = resolve_config(options);
        data = load_dataset(cfg);
        validate_bundle(data);
        model = resolved_model(cfg, data);
        validate(model);
      });
      rc != exit_ok) {
    return rc;
  }
  const std::string config_json = run_config_json(cfg);
  try {
    fs::create_directories(cfg.output_dir);
    const auto start = std::chrono::steady_clock::now();
    FitResult result = fit(DaNet(model), data, cfg.train);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const EvalReport report = evaluate(result.net, data, result.stats, result.holdout);
    save_checkpoint(result.net, cfg.output_dir / "checkpoint.json", config_json);
    write_text(cfg.output_dir / "trainlog.json", trainlog_json(result.log));
    write_text(cfg.output_dir / "evalreport.json", evalreport_json(report, cfg.label, cfg.train.seed));
    const fs::path embeddings = cfg.output_dir / "embeddings.jsonl";
    if (cfg.emit_embeddings) {
      dump_embeddings(result.net, data, result.stats, embeddings, DumpOptions{200, cfg.train.seed});
    } else {
      fs::remove(embeddings);
    }
    print_summary(io, cfg, report);
    fmt::print(io.out, "trained {} epochs in {:.1f}s; outputs in {}\n", cfg.train.epochs, seconds,
               cfg.output_dir.string());
    return exit_ok;
  } catch (const TrainingAborted& e) {
    fmt::print(io.err, "training aborted: {}\n", e.what());
    if (e.last_good()) {
      try {
        save_checkpoint(*e.last_good(), cfg.output_dir / "checkpoint.json", config_json);
        fmt::print(io.err, "last good parameters written to {}\n", (cfg.output_dir / "checkpoint.json").string());
      } catch (const std::exception& inner) {
        fmt::print(io.err, "could not write last good checkpoint: {}\n", inner.what());
      }
    }
    return exit_runtime_abort;
  } catch (const std::exception& e) {
    fmt::print(io.err, "error: {}\n", e.what());
    return is_input_error(e) && !dynamic_cast<const IoError*>(&e) ? exit_config_error : exit_runtime_abort;
  }
}

int cmd_eval(const RunOptions& options, Console io) {
  RunConfig cfg;
  DatasetBundle data;
  DaNet net;
  if (int rc = load_stage(io, [&] {
        cfg = resolve_config(options);
        data = load_dataset(cfg);
        validate_bundle(data);
        net = load_checkpoint(options.checkpoint.value_or(cfg.output_dir / "checkpoint.json"));
        const ModelConfig expected = resolved_model(cfg, data);
        if (net.config().input_dim != expected.input_dim || net.config().num_classes != expected.num_classes ||
            net.num_sources() != expected.num_sources) {
          throw SchemaError("checkpoint does not match the dataset's dimensions");
        }
      });
      rc != exit_ok) {
    return rc;
  }
  try {
    std::vector<SampleSet> holdout;
    const DatasetBundle train = split_for_training(data, cfg.train, holdout);
    const auto stats = fit_source_stats(net, train.sources, cfg.train.shrinkage);
    const EvalReport report = evaluate(net, data, stats, holdout);
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "evalreport.json", evalreport_json(report, cfg.label, cfg.train.seed));
    print_summary(io, cfg, report);
    return exit_ok;
  } catch (const std::exception& e) {
    fmt::print(io.err, "error: {}\n", e.what());
    return exit_runtime_abort;
  }
}

int cmd_gradcheck(std::optional<std::string> inject_fault, Console io) {
  GradcheckOptions options;
  options.corrupt_loss = std::move(inject_fault);
  std::vector<GradcheckEntry> entries;
  try {
    entries = run_gradcheck_suite(options);
  } catch (const std::exception& e) {
    fmt::print(io.err, "gradcheck failed: {}\n", e.what());
    return exit_verification_failed;
  }
  bool ok = true;
  for (const auto& entry : entries) {
    const auto& r = entry.report;
    fmt::print(io.out, "{:<13} max_rel_err={:.3e} entries={} worst={}[{}] {:.2f}s {}\n", entry.loss,
               r.max_rel_error, r.entries_checked, r.worst_param, r.worst_index, entry.seconds,
               r.passed ? "PASS" : "FAIL");
    if (!r.passed) {
      ok = false;
      fmt::print(io.err, "gradient check failed for loss {}: parameter {} entry {} analytic={:.6e} numeric={:.6e}\n",
                 entry.loss, r.worst_param, r.worst_index, r.worst_analytic, r.worst_numeric);
    }
  }
  return ok ? exit_ok : exit_verification_failed;
}

int cmd_report(const std::vector<fs::path>& run_dirs, const std::optional<fs::path>& out, Console io) {
  std::map<std::string, Aggregate> rows;
  for (const auto& dir : run_dirs) {
    const fs::path file = dir / "evalreport.json";
    try {
      const EvalSummary s = parse_evalreport(read_text(file));
      Aggregate& agg = rows[s.label];
      agg.accuracy.push_back(s.target_accuracy);
      agg.macro_f1.push_back(s.target_macro_f1);
      agg.gap.push_back(s.confusion_gap);
    } catch (const std::exception& e) {
      fmt::print(io.err, "warning: skipping {}: {}\n", dir.string(), e.what());
    }
  }
  if (rows.empty()) {
    fmt::print(io.err, "error: no readable evalreport.json in the given run dirs\n");
    return exit_config_error;
  }
  std::string csv = fmt::format("{}\n", report_header);
  for (const auto& [label, agg] : rows) {
    const auto [acc_m, acc_s] = mean_std(agg.accuracy);
    const auto [f1_m, f1_s] = mean_std(agg.macro_f1);
    const auto [gap_m, gap_s] = mean_std(agg.gap);
    csv += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", label, agg.accuracy.size(), acc_m,
                       acc_s, f1_m, f1_s, gap_m, gap_s);
  }
  if (out) {
    try {
      if (out->has_parent_path()) fs::create_directories(out->parent_path());
      write_text(*out, csv);
    } catch (const std::exception& e) {
      fmt::print(io.err, "error: {}\n", e.what());
      return exit_runtime_abort;
    }
  } else {
    io.out << csv;
  }
  return exit_ok;
}

}  // namespace mshift::cli
