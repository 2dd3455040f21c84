#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "commands.hpp"
#include "config.hpp"
#include "json.hpp"
#include "mmd_oracle.hpp"
#include "mshift/distance.hpp"
#include "mshift/model.hpp"
#include "mshift/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mshift;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;

void verdict(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void note(const std::string& line) {
  std::fprintf(stderr, "  %s\n", line.c_str());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += fmt::format("{}{:.3f}", out.empty() ? "" : " ", x);
  return out;
}

// --- criteria ----------------------------------------------------------

void gradient_fidelity() {
  std::ostringstream out, err;
  const auto start = Clock::now();
  const int code = cli::cmd_gradcheck(std::nullopt, cli::Console{out, err});
  const double secs = seconds_since(start);
  std::istringstream lines(out.str());
  for (std::string line; std::getline(lines, line);) note(line);
  verdict(code == cli::exit_ok && secs < 60.0, "gradient_fidelity",
          fmt::format("gradcheck exit {} in {:.2f}s (limit 60s, tolerance 1e-4)", code, secs));
}

void mmd_oracle() {
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<int> size(1, 50);
  std::uniform_int_distribution<int> width(1, 16);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Index rows, Index cols, double shift) {
    Tensor2 t(rows, cols);
    for (Index k = 0; k < t.size(); ++k) t.data()[k] = normal(rng) + shift;
    return t;
  };
  double worst = 0.0, self = 0.0, asym = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = width(rng);
    const Tensor2 xs = draw(size(rng), d, 0.0);
    const Tensor2 ys = draw(size(rng), d, trial % 3 == 0 ? 0.0 : 0.5);
    if (xs.rows() + ys.rows() < 2) continue;
    const KernelConfig kernel = trial % 2 == 0 ? KernelConfig::median() : KernelConfig::fixed(0.5 + trial * 0.05);
    const double sigma = kernel.mode == KernelConfig::Mode::fixed ? kernel.sigma : oracle::loop_median(xs, ys);
    const double v = mmd2(xs, ys, kernel);
    worst = std::max(worst, std::abs(v - oracle::loop_mmd2(xs, ys, sigma)));
    asym = std::max(asym, std::abs(v - mmd2(ys, xs, kernel)));
    if (xs.rows() >= 2) self = std::max(self, std::abs(mmd2(xs, xs, kernel)));
  }
  verdict(worst <= 1e-10 && self <= 1e-12 && asym <= 1e-12, "mmd_oracle_equivalence",
          fmt::format("100 pairs: max |impl-oracle|={:.2e} (<=1e-10), max mmd2(X,X)={:.2e} (<=1e-12), "
                      "max asymmetry={:.2e} (<=1e-12)",
                      worst, self, asym));
}

void freezing_contract(const fs::path& config) {
  cli::RunConfig cfg = cli::load_run_config(config);
  cli::override_seed(cfg, 1);
  const DatasetBundle data = cli::load_dataset(cfg);
  TrainConfig train = cfg.train;
  train.verify_freezing = true;
  const FitResult r = fit(DaNet(cli::resolved_model(cfg, data)), data, train);
  const bool ok = r.audit.violations == 0 && r.audit.fcd_checks > 0 && r.audit.adapt_checks > 0;
  verdict(ok, "freezing_contract",
          fmt::format("{} disentangling checks, {} adaptation checks, {} violations", r.audit.fcd_checks,
                      r.audit.adapt_checks, r.audit.violations));
}

struct RunResult {
  double accuracy = 0.0;
  double gap = 0.0;
  std::vector<double> branch_mmd;
  double seconds = 0.0;
};

RunResult train_run(const fs::path& config, const std::string& ablation, std::uint64_t seed,
                    const fs::path& out) {
  cli::RunOptions opt;
  opt.config = config;
  opt.ablation = ablation;
  opt.seed = seed;
  opt.out = out;
  std::ostringstream o, e;
  const auto start = Clock::now();
  const int code = cli::cmd_train(opt, cli::Console{o, e});
  RunResult r;
  r.seconds = seconds_since(start);
  if (code != cli::exit_ok) throw std::runtime_error(fmt::format("train {} seed {} failed: {}", ablation, seed, e.str()));
  const json report = json::parse(slurp(out / "evalreport.json"));
  r.accuracy = report.at("target_accuracy").get<double>();
  r.gap = report.at("confusion_gap").get<double>();
  for (const json& row : report.at("classwise_mmd")) {
    double s = 0.0;
    int n = 0;
    for (const json& v : row) {
      if (v.is_null()) continue;
      s += v.get<double>();
      ++n;
    }
    r.branch_mmd.push_back(n > 0 ? s / n : std::nan(""));
  }
  return r;
}

void determinism(const fs::path& config, const fs::path& scratch) {
  train_run(config, "full", 1, scratch / "det_a");
  train_run(config, "full", 1, scratch / "det_b");
  bool same = true;
  std::string detail;
  for (const char* f : {"trainlog.json", "checkpoint.json"}) {
    const bool eq = slurp(scratch / "det_a" / f) == slurp(scratch / "det_b" / f);
    same = same && eq;
    detail += fmt::format("{}{} {}", detail.empty() ? "" : ", ", f, eq ? "identical" : "differs");
  }
  verdict(same, "determinism", detail);
}

void comparative(const fs::path& config, const fs::path& scratch) {
  const std::vector<std::string> ablations{"full", "erm", "no_fcd", "no_cpa"};
  std::map<std::string, std::vector<RunResult>> runs;
  double slowest = 0.0;
  for (const auto& a : ablations) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      RunResult r = train_run(config, a, seed, scratch / fmt::format("{}_{}", a, seed));
      slowest = std::max(slowest, r.seconds);
      runs[a].push_back(std::move(r));
    }
  }
  auto accuracies = [&](const std::string& a) {
    std::vector<double> v;
    for (const auto& r : runs[a]) v.push_back(r.accuracy);
    return v;
  };
  auto gaps = [&](const std::string& a) {
    std::vector<double> v;
    for (const auto& r : runs[a]) v.push_back(r.gap);
    return v;
  };
  for (const auto& a : ablations) {
    note(fmt::format("{:<7} accuracy {:.4f} [{}]  confusion gap {:.4f}", a, mean(accuracies(a)),
                     join(accuracies(a)), mean(gaps(a))));
  }

  const double full = mean(accuracies("full"));
  const double erm = mean(accuracies("erm"));
  const double no_fcd = mean(accuracies("no_fcd"));
  const double no_cpa = mean(accuracies("no_cpa"));

  verdict(full - erm >= 0.03 && slowest < 300.0, "main_effect",
          fmt::format("full {:.4f} - erm {:.4f} = {:+.2f} points (>= 3), slowest run {:.1f}s (< 300s)", full,
                      erm, 100.0 * (full - erm), slowest));
  verdict(full >= no_fcd && full >= no_cpa, "ablation_ordering",
          fmt::format("full {:.4f} vs no_fcd {:.4f} and no_cpa {:.4f}", full, no_fcd, no_cpa));

  const double gap_full = mean(gaps("full"));
  const double gap_no_fcd = mean(gaps("no_fcd"));
  verdict(gap_full >= 0.05 && gap_full > gap_no_fcd, "disentanglement",
          fmt::format("branch-confusion gap full {:.2f} points (>= 5), no_fcd {:.2f} points",
                      100.0 * gap_full, 100.0 * gap_no_fcd));

  bool lower = true;
  std::string detail;
  const std::size_t M = runs["full"].front().branch_mmd.size();
  for (std::size_t i = 0; i < M; ++i) {
    std::vector<double> f, n;
    for (const auto& r : runs["full"]) f.push_back(r.branch_mmd[i]);
    for (const auto& r : runs["no_cpa"]) n.push_back(r.branch_mmd[i]);
    lower = lower && mean(f) < mean(n);
    detail += fmt::format("{}branch {}: {:.4f} vs {:.4f}", detail.empty() ? "" : ", ", i, mean(f), mean(n));
  }
  verdict(lower, "alignment", "class-wise MMD full vs no_cpa, " + detail);
}

void ensemble_sanity() {
  // Identity encoder so the statistics live in input space.
  ModelConfig mc;
  mc.input_dim = 8;
  mc.encoder_widths = {8};
  mc.disentangler_width = 8;
  mc.adaptor_width = 8;
  mc.num_classes = 3;
  mc.num_sources = 3;
  mc.activation = Activation::none;
  mc.dropout_rate = 0.0;
  DaNet net(mc);
  net.param("encoder.0.W").value.setIdentity();
  net.param("encoder.0.b").value.setZero();

  const double sigma = 1.0;
  const double separation = 10.0;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal(0.0, sigma);
  std::vector<GaussianStats> stats;
  Tensor2 means = Tensor2::Zero(3, 8);
  for (int i = 0; i < 3; ++i) {
    means(i, i) = separation;
    Tensor2 cloud(500, 8);
    for (Index r = 0; r < cloud.rows(); ++r) {
      for (Index c = 0; c < 8; ++c) cloud(r, c) = means(i, c) + normal(rng);
    }
    stats.push_back(fit_gaussian_stats(cloud, 0.1));
  }
  const EnsembleOutput out = ensemble_forward(net, stats, means);
  double weakest = 1.0;
  for (int i = 0; i < 3; ++i) weakest = std::min(weakest, out.weights(i, i));
  verdict(weakest > 0.9, "ensemble_sanity",
          fmt::format("mean separation >= {:.1f} sigma, smallest own-source weight {:.6f} (> 0.9)",
                      separation * std::sqrt(2.0) / sigma, weakest));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(MSHIFT_BENCHMARK_CONFIG);
  const fs::path scratch = fs::temp_directory_path() / "mshift_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  auto guarded = [](const char* name, const auto& f) {
    try {
      f();
    } catch (const std::exception& e) {
      verdict(false, name, fmt::format("error: {}", e.what()));
    }
  };
  guarded("gradient_fidelity", gradient_fidelity);
  guarded("mmd_oracle_equivalence", mmd_oracle);
  guarded("freezing_contract", [&] { freezing_contract(config); });
  guarded("determinism", [&] { determinism(config, scratch); });
  guarded("comparative", [&] { comparative(config, scratch); });
  guarded("ensemble_sanity", ensemble_sanity);

  fs::remove_all(scratch);
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "SOME FAILED", failures);
  return failures == 0 ? 0 : 1;
}
