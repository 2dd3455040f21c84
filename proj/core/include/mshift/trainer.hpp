#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mshift/dataset.hpp"
#include "mshift/distance.hpp"
#include "mshift/error.hpp"
#include "mshift/eval.hpp"
#include "mshift/losses.hpp"
#include "mshift/model.hpp"

namespace mshift {

enum class CpaMode { none, class_aware, language_mmd, scl };

/// Which objectives run. Named settings: "full", "no_fcd", "no_cpa",
/// "cpa_language_mmd", "cpa_scl" and "erm" (no_fcd + no_cpa).
struct Ablation {
  bool fcd = true;
  CpaMode cpa = CpaMode::class_aware;

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);
std::string to_string(CpaMode m);

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double tau = 0.5;
  double eta = 0.5;
  double gamma = 1e-4;
  double lr_encoder = 0.01;
  double lr_heads = 0.01;
  std::size_t batch_size = 64;
  int epochs = 30;  // including the warm-up epoch
  std::uint64_t seed = 1;
  double shrinkage = 0.1;
  std::size_t alpha_subsample = 256;
  Ablation ablation;
  std::optional<double> pseudo_confidence_threshold;
  bool deterministic = true;  // all paths reduce in a fixed order regardless

  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  int min_class_count = 2;
  double validation_fraction = 0.1;
  bool verify_freezing = true;
  KernelConfig kernel = KernelConfig::median();
};

void validate(const TrainConfig& cfg);

/// Mini-batch gradient descent (or Adam) with one learning rate for the
/// encoder and one for every branch tensor.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg);

  /// Applies `grads` to the matching tensors of `net`; ids not in `grads`
  /// are left untouched.
  void apply(DaNet& net, const GradMap& grads);

 private:
  struct Moments {
    Tensor2 m;
    Tensor2 v;
    std::uint64_t t = 0;
  };
  OptimizerKind kind_;
  double lr_encoder_;
  double lr_heads_;
  double beta1_;
  double beta2_;
  double epsilon_;
  std::map<std::string, Moments> moments_;
};

struct StepRecord {
  double ce = 0.0;
  double fcd = 0.0;
  double cpa = 0.0;
  bool cpa_evaluated = false;
  CpaMode cpa_term = CpaMode::none;  // which CPA loss produced `cpa`
  std::size_t pseudo_labelled = 0;
  bool momentum_updated = false;
};

struct EpochRecord {
  int epoch = 0;
  std::string phase;  // "warmup" or "alternate"
  std::size_t steps = 0;
  double ce = 0.0;
  std::optional<double> fcd;
  std::optional<double> cpa;
  std::vector<double> source_accuracy;  // own-branch accuracy on held-out source data
  Tensor2 cross_branch_accuracy;
  double target_accuracy = 0.0;
  double target_macro_f1 = 0.0;
  std::vector<double> classwise_mmd;  // per branch mean over classes
  Tensor2 alpha;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct FreezeAudit {
  std::size_t fcd_checks = 0;
  std::size_t adapt_checks = 0;
  std::size_t violations = 0;
};

/// Thrown when a loss turns non-finite; carries the parameters at the start
/// of the failing epoch.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::shared_ptr<const DaNet> last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const std::shared_ptr<const DaNet>& last_good() const { return last_good_; }

 private:
  std::shared_ptr<const DaNet> last_good_;
};

/// Test hooks run right after a step's parameter update, before the
/// freezing check.
struct StepHooks {
  std::function<void(DaNet&)> after_fcd_update;
  std::function<void(DaNet&)> after_adapt_update;
};

/// Owns the live model, the momentum copy, the cached alpha matrix and the
/// Gaussian statistics for one training run.
class Trainer {
 public:
  /// `train` must be validated; `holdout` is the per-source validation data.
  Trainer(DaNet net, DatasetBundle train, std::vector<SampleSet> holdout, TrainConfig cfg);

  /// One pass of cross-entropy over the sources; afterwards the momentum
  /// model is a copy of the live model and statistics are fitted.
  EpochRecord warmup_epoch();

  /// Updates disentanglers only, with L_FCD.
  StepRecord fcd_step(std::span<const Batch> source_batches);

  /// Pseudo-labels the target batch with the momentum model, updates
  /// everything except the disentanglers with CE + eta * CPA, then moves
  /// the momentum model once.
  StepRecord adapt_step(std::span<const Batch> source_batches, const Batch& target_batch);

  /// One alternating epoch (alpha and statistics refreshed first).
  EpochRecord alternate_epoch(int epoch);

  /// Recomputes alpha and the live and momentum Gaussian statistics.
  void refresh_statistics(int epoch);

  const DaNet& net() const { return net_; }
  DaNet& mutable_net() { return net_; }
  const std::optional<MomentumNet>& momentum() const { return momentum_; }
  const std::vector<GaussianStats>& live_stats() const { return live_stats_; }
  const std::vector<GaussianStats>& momentum_stats() const { return momentum_stats_; }
  const Tensor2& alpha() const { return alpha_; }
  const TrainConfig& config() const { return cfg_; }
  const FreezeAudit& audit() const { return audit_; }
  std::size_t momentum_updates() const { return momentum_updates_; }
  const std::vector<SampleSet>& holdout() const { return holdout_; }
  const DatasetBundle& train_data() const { return train_; }
  StepHooks& hooks() { return hooks_; }

  /// Source batches for step `step` of `epoch` (the shorter sources cycle).
  std::vector<Batch> source_batches(int epoch, std::size_t step) const;
  std::size_t steps_per_epoch() const;
  /// Next target batch from the cycling seeded iterator.
  Batch next_target_batch();
  /// Dropout seed of the k-th optimisation step.
  EncodeMode step_mode(std::uint64_t step) const;

 private:
  void fill_epoch_metrics(EpochRecord& record);
  void check_finite(double value, const char* what, int epoch, std::size_t step) const;

  DaNet net_;
  DatasetBundle train_;
  std::vector<SampleSet> holdout_;
  TrainConfig cfg_;
  Optimizer optimizer_;
  std::optional<MomentumNet> momentum_;
  std::vector<GaussianStats> live_stats_;
  std::vector<GaussianStats> momentum_stats_;
  Tensor2 alpha_;
  FreezeAudit audit_;
  StepHooks hooks_;
  std::size_t momentum_updates_ = 0;
  std::uint64_t global_step_ = 0;
  std::uint64_t target_cycle_ = 0;
  std::vector<std::vector<std::size_t>> target_batches_;
  std::size_t target_cursor_ = 0;
  std::shared_ptr<const DaNet> last_good_;
  int current_epoch_ = 0;
};

struct FitResult {
  DaNet net;
  TrainLog log;
  std::vector<GaussianStats> stats;  // live statistics refreshed after training
  std::vector<SampleSet> holdout;
  FreezeAudit audit;
  std::size_t momentum_updates = 0;
};

/// The training/held-out split fit() uses for `cfg`.
DatasetBundle split_for_training(const DatasetBundle& bundle, const TrainConfig& cfg,
                                 std::vector<SampleSet>& holdout);

/// Per-source Gaussian statistics of eval-mode encoder outputs.
std::vector<GaussianStats> fit_source_stats(const DaNet& net, std::span<const SampleSet> sources,
                                            double shrinkage);

/// Warm-up followed by cfg.epochs - 1 alternating epochs. Source held-out
/// sets are split off with cfg.validation_fraction before training.
FitResult fit(DaNet net, const DatasetBundle& bundle, const TrainConfig& cfg,
              const StepHooks& hooks = {});

}  // namespace mshift
