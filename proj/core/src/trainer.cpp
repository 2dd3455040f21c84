#include "mshift/trainer.hpp"

#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "mshift/random.hpp"

namespace mshift {

namespace {

bool in_group(const std::string& id, ParamGroup g) { return param_group(id) == g; }

// Bit-exact copies of the tensors a step must not touch.
struct Snapshot {
  std::vector<std::pair<const ParamTensor*, Tensor2>> saved;
};

Snapshot snapshot(const DaNet& net, bool disentanglers) {
  Snapshot s;
  for (const ParamTensor* p : net.params()) {
    if (in_group(p->id, ParamGroup::disentangler) == disentanglers) s.saved.emplace_back(p, p->value);
  }
  return s;
}

std::string first_changed(const Snapshot& s) {
  for (const auto& [p, before] : s.saved) {
    const auto bytes = static_cast<std::size_t>(before.size()) * sizeof(double);
    if (p->value.size() != before.size() || std::memcmp(p->value.data(), before.data(), bytes) != 0) {
      return p->id;
    }
  }
  return {};
}

}  // namespace

Ablation parse_ablation(const std::string& name) {
  if (name == "full") return {true, CpaMode::class_aware};
  if (name == "no_fcd") return {false, CpaMode::class_aware};
  if (name == "no_cpa") return {true, CpaMode::none};
  if (name == "cpa_language_mmd") return {true, CpaMode::language_mmd};
  if (name == "cpa_scl") return {true, CpaMode::scl};
  if (name == "erm" || name == "no_fcd+no_cpa" || name == "no_cpa+no_fcd") return {false, CpaMode::none};
  throw ConfigError(fmt::format(
      "unknown ablation '{}' (expected full|no_fcd|no_cpa|cpa_language_mmd|cpa_scl|erm)", name));
}

std::string to_string(CpaMode m) {
  switch (m) {
    case CpaMode::none: return "none";
    case CpaMode::class_aware: return "class_aware";
    case CpaMode::language_mmd: return "language_mmd";
    case CpaMode::scl: return "scl";
  }
  return "none";
}

std::string to_string(Ablation a) {
  if (a.fcd) {
    switch (a.cpa) {
      case CpaMode::class_aware: return "full";
      case CpaMode::none: return "no_cpa";
      case CpaMode::language_mmd: return "cpa_language_mmd";
      case CpaMode::scl: return "cpa_scl";
    }
  }
  switch (a.cpa) {
    case CpaMode::class_aware: return "no_fcd";
    case CpaMode::none: return "erm";
    case CpaMode::language_mmd: return "no_fcd+cpa_language_mmd";
    case CpaMode::scl: return "no_fcd+cpa_scl";
  }
  return "full";
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(cfg.eta >= 0.0)) throw ConfigError("eta must be >= 0");
  if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (!(cfg.lr_encoder > 0.0) || !(cfg.lr_heads > 0.0)) throw ConfigError("learning rates must be > 0");
  if (cfg.batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.shrinkage < 0.0 || cfg.shrinkage > 1.0) throw ConfigError("shrinkage must lie in [0, 1]");
  if (cfg.alpha_subsample < 2) throw ConfigError("alpha_subsample must be >= 2");
  if (cfg.min_class_count < 1) throw ConfigError("min_class_count must be >= 1");
  if (cfg.validation_fraction < 0.0 || cfg.validation_fraction >= 1.0) {
    throw ConfigError("validation_fraction must lie in [0, 1)");
  }
  if (cfg.pseudo_confidence_threshold &&
      (*cfg.pseudo_confidence_threshold < 0.0 || *cfg.pseudo_confidence_threshold > 1.0)) {
    throw ConfigError("pseudo_confidence_threshold must lie in [0, 1]");
  }
  validate(cfg.kernel);
}

Optimizer::Optimizer(const TrainConfig& cfg)
    : kind_(cfg.optimizer),
      lr_encoder_(cfg.lr_encoder),
      lr_heads_(cfg.lr_heads),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      epsilon_(cfg.adam_epsilon) {}

void Optimizer::apply(DaNet& net, const GradMap& grads) {
  for (const auto& [id, g] : grads) {
    ParamTensor& p = net.param(id);
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) {
      throw IntegrityError(fmt::format("gradient for '{}' has shape {}, parameter {}", id,
                                       shape_string(g), shape_string(p.value)));
    }
    const double lr = in_group(id, ParamGroup::encoder) ? lr_encoder_ : lr_heads_;
    if (kind_ == OptimizerKind::sgd) {
      p.value -= lr * g;
      continue;
    }
    Moments& mo = moments_[id];
    if (mo.t == 0) {
      mo.m = Tensor2::Zero(g.rows(), g.cols());
      mo.v = Tensor2::Zero(g.rows(), g.cols());
    }
    ++mo.t;
    mo.m = beta1_ * mo.m + (1.0 - beta1_) * g;
    mo.v = beta2_ * mo.v + (1.0 - beta2_) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(mo.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(mo.t));
    p.value.array() -= lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + epsilon_);
  }
}

Trainer::Trainer(DaNet net, DatasetBundle train, std::vector<SampleSet> holdout, TrainConfig cfg)
    : net_(std::move(net)),
      train_(std::move(train)),
      holdout_(std::move(holdout)),
      cfg_(std::move(cfg)),
      optimizer_(cfg_) {
  validate(cfg_);
  if (net_.num_sources() != train_.num_sources()) {
    throw ConfigError(fmt::format("model has {} branches but the data has {} sources",
                                  net_.num_sources(), train_.num_sources()));
  }
  if (net_.num_classes() != train_.num_classes || net_.config().input_dim != train_.dim) {
    throw ConfigError("model input width or class count does not match the data");
  }
  alpha_ = Tensor2::Zero(net_.num_sources(), net_.num_sources());
}

std::size_t Trainer::steps_per_epoch() const {
  std::size_t steps = 0;
  for (const auto& src : train_.sources) {
    steps = std::max(steps, (src.size() + cfg_.batch_size - 1) / cfg_.batch_size);
  }
  return steps;
}

std::vector<Batch> Trainer::source_batches(int epoch, std::size_t step) const {
  std::vector<Batch> out;
  for (std::size_t i = 0; i < train_.sources.size(); ++i) {
    const auto order = batch_iter(train_.sources[i].size(), cfg_.batch_size, mix_seed(cfg_.seed, i),
                                  static_cast<std::uint64_t>(epoch));
    out.push_back(make_batch(train_.sources[i], order[step % order.size()]));
  }
  return out;
}

Batch Trainer::next_target_batch() {
  if (target_cursor_ >= target_batches_.size()) {
    target_batches_ = batch_iter(train_.target_train.size(), cfg_.batch_size,
                                 mix_seed(cfg_.seed, train_.sources.size()), target_cycle_++);
    target_cursor_ = 0;
  }
  return make_batch(train_.target_train, target_batches_[target_cursor_++]);
}

EncodeMode Trainer::step_mode(std::uint64_t step) const {
  return EncodeMode::training(mix_seed(cfg_.seed ^ 0x5eedULL, step));
}

void Trainer::check_finite(double value, const char* what, int epoch, std::size_t step) const {
  if (!std::isfinite(value)) {
    throw TrainingAborted(
        fmt::format("non-finite {} loss at epoch {} step {}; training aborted", what, epoch, step),
        last_good_);
  }
}

void Trainer::refresh_statistics(int epoch) {
  const auto seed = mix_seed(cfg_.seed, 0xa1fa0000ULL + static_cast<std::uint64_t>(epoch));
  if (cfg_.ablation.fcd) {
    alpha_ = source_pair_alpha(net_, train_.sources, cfg_.alpha_subsample, seed, cfg_.kernel).alpha;
  }
  live_stats_.clear();
  momentum_stats_.clear();
  for (const auto& src : train_.sources) {
    const Tensor2 x = features_matrix(src);
    live_stats_.push_back(fit_gaussian_stats(encode(net_, x, EncodeMode::eval()), cfg_.shrinkage));
    if (momentum_) {
      momentum_stats_.push_back(
          fit_gaussian_stats(encode(momentum_->net, x, EncodeMode::eval()), cfg_.shrinkage));
    }
  }
}

void Trainer::fill_epoch_metrics(EpochRecord& record) {
  record.alpha = alpha_;
  const auto stats = fit_source_stats(net_, train_.sources, cfg_.shrinkage);
  const bool have_holdout = !holdout_.empty() && !holdout_.front().empty();
  const std::span<const SampleSet> sources = have_holdout ? std::span<const SampleSet>(holdout_)
                                                          : std::span<const SampleSet>(train_.sources);
  if (!train_.target_test.empty()) {
    const EvalReport report = evaluate(net_, train_, stats, sources);
    record.cross_branch_accuracy = report.branch_confusion;
    record.target_accuracy = report.target_accuracy;
    record.target_macro_f1 = report.target_macro_f1;
    for (int i = 0; i < net_.num_sources(); ++i) record.classwise_mmd.push_back(report.mean_classwise_mmd(i));
  } else {
    record.cross_branch_accuracy = branch_confusion(net_, sources);
  }
  for (int i = 0; i < net_.num_sources(); ++i) record.source_accuracy.push_back(record.cross_branch_accuracy(i, i));
}

EpochRecord Trainer::warmup_epoch() {
  current_epoch_ = 0;
  last_good_ = std::make_shared<const DaNet>(net_);
  EpochRecord record;
  record.epoch = 0;
  record.phase = "warmup";
  const std::size_t steps = steps_per_epoch();
  double ce_sum = 0.0;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto batches = source_batches(0, step);
    const LossResult ce = loss_ce(net_, batches, step_mode(global_step_++));
    check_finite(ce.value, "cross-entropy", 0, step);
    optimizer_.apply(net_, ce.grads);
    ce_sum += ce.value;
  }
  record.steps = steps;
  record.ce = ce_sum / static_cast<double>(steps);
  momentum_ = make_momentum(net_, cfg_.gamma);
  refresh_statistics(0);
  fill_epoch_metrics(record);
  return record;
}

StepRecord Trainer::fcd_step(std::span<const Batch> source_batches) {
  StepRecord record;
  if (!cfg_.ablation.fcd) return record;
  if (!momentum_) throw StateError("fcd_step called before the warm-up epoch");
  const Snapshot frozen = cfg_.verify_freezing ? snapshot(net_, false) : Snapshot{};
  const LossResult fcd = loss_fcd_total(net_, source_batches, alpha_, step_mode(global_step_++));
  check_finite(fcd.value, "FCD", current_epoch_, global_step_);
  for (const auto& [id, g] : fcd.grads) {
    if (!in_group(id, ParamGroup::disentangler)) {
      throw IntegrityError(fmt::format("FCD produced a gradient for non-disentangler '{}'", id));
    }
  }
  optimizer_.apply(net_, fcd.grads);
  if (hooks_.after_fcd_update) hooks_.after_fcd_update(net_);
  if (cfg_.verify_freezing) {
    ++audit_.fcd_checks;
    if (const auto changed = first_changed(frozen); !changed.empty()) {
      ++audit_.violations;
      throw IntegrityError(fmt::format("disentangling step modified frozen tensor '{}'", changed));
    }
  }
  record.fcd = fcd.value;
  return record;
}

StepRecord Trainer::adapt_step(std::span<const Batch> source_batches, const Batch& target_batch) {
  if (!momentum_) throw StateError("adapt_step called before the warm-up epoch");
  StepRecord record;
  const Snapshot frozen = cfg_.verify_freezing ? snapshot(net_, true) : Snapshot{};
  const EncodeMode mode = step_mode(global_step_++);

  const LossResult ce = loss_ce(net_, source_batches, mode);
  check_finite(ce.value, "cross-entropy", current_epoch_, global_step_);
  GradMap grads = ce.grads;
  record.ce = ce.value;

  if (cfg_.ablation.cpa != CpaMode::none && cfg_.eta > 0.0) {
    Batch target = target_batch;
    const PseudoLabels pseudo = momentum_predict_target(*momentum_, target.x, momentum_stats_);
    target.labels = pseudo.labels;
    if (cfg_.pseudo_confidence_threshold) {
      for (std::size_t r = 0; r < target.labels.size(); ++r) {
        if (pseudo.confidences[r] < *cfg_.pseudo_confidence_threshold) target.labels[r] = -1;
      }
    }
    for (int y : target.labels) record.pseudo_labelled += y >= 0 ? 1 : 0;

    LossResult cpa;
    switch (cfg_.ablation.cpa) {
      case CpaMode::class_aware: {
        AlignOptions opts;
        opts.tau = cfg_.tau;
        opts.min_class_count = cfg_.min_class_count;
        opts.kernel = cfg_.kernel;
        cpa = loss_cpa(net_, source_batches, target, opts, mode);
        break;
      }
      case CpaMode::language_mmd:
        cpa = loss_cpa_language(net_, source_batches, target, cfg_.kernel, mode);
        break;
      case CpaMode::scl:
        for (int i = 0; i < net_.num_sources(); ++i) {
          const LossResult part = loss_scl(net_, i, source_batches[static_cast<std::size_t>(i)], target, cfg_.tau, mode);
          cpa.value += part.value;
          accumulate(cpa.grads, part.grads);
        }
        break;
      case CpaMode::none: break;
    }
    check_finite(cpa.value, "CPA", current_epoch_, global_step_);
    accumulate(grads, cpa.grads, cfg_.eta);
    record.cpa = cpa.value;
    record.cpa_evaluated = true;
    record.cpa_term = cfg_.ablation.cpa;
  }

  // Disentanglers stay fixed during adaptation.
  for (auto it = grads.begin(); it != grads.end();) {
    it = in_group(it->first, ParamGroup::disentangler) ? grads.erase(it) : std::next(it);
  }
  optimizer_.apply(net_, grads);
  if (hooks_.after_adapt_update) hooks_.after_adapt_update(net_);
  if (cfg_.verify_freezing) {
    ++audit_.adapt_checks;
    if (const auto changed = first_changed(frozen); !changed.empty()) {
      ++audit_.violations;
      throw IntegrityError(fmt::format("adaptation step modified frozen tensor '{}'", changed));
    }
  }
  momentum_update(*momentum_, net_);
  ++momentum_updates_;
  record.momentum_updated = true;
  return record;
}

EpochRecord Trainer::alternate_epoch(int epoch) {
  current_epoch_ = epoch;
  last_good_ = std::make_shared<const DaNet>(net_);
  refresh_statistics(epoch);
  EpochRecord record;
  record.epoch = epoch;
  record.phase = "alternate";
  const std::size_t steps = steps_per_epoch();
  double ce_sum = 0.0;
  double fcd_sum = 0.0;
  double cpa_sum = 0.0;
  std::size_t cpa_count = 0;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto batches = source_batches(epoch, step);
    const StepRecord f = fcd_step(batches);
    const Batch target = next_target_batch();
    const StepRecord a = adapt_step(batches, target);
    fcd_sum += f.fcd;
    ce_sum += a.ce;
    if (a.cpa_evaluated) {
      cpa_sum += a.cpa;
      ++cpa_count;
    }
  }
  record.steps = steps;
  record.ce = ce_sum / static_cast<double>(steps);
  if (cfg_.ablation.fcd) record.fcd = fcd_sum / static_cast<double>(steps);
  if (cpa_count > 0) record.cpa = cpa_sum / static_cast<double>(cpa_count);
  fill_epoch_metrics(record);
  return record;
}

DatasetBundle split_for_training(const DatasetBundle& bundle, const TrainConfig& cfg,
                                 std::vector<SampleSet>& holdout) {
  return split_source_holdout(bundle, cfg.validation_fraction, mix_seed(cfg.seed, 0x401d07ULL), holdout);
}

std::vector<GaussianStats> fit_source_stats(const DaNet& net, std::span<const SampleSet> sources,
                                            double shrinkage) {
  std::vector<GaussianStats> stats;
  for (const SampleSet& src : sources) {
    stats.push_back(fit_gaussian_stats(encode(net, features_matrix(src), EncodeMode::eval()), shrinkage));
  }
  return stats;
}

FitResult fit(DaNet net, const DatasetBundle& bundle, const TrainConfig& cfg, const StepHooks& hooks) {
  validate(cfg);
  validate_bundle(bundle);
  std::vector<SampleSet> holdout;
  DatasetBundle train = split_for_training(bundle, cfg, holdout);
  Trainer trainer(std::move(net), std::move(train), holdout, cfg);
  trainer.hooks() = hooks;
  FitResult result;
  result.log.epochs.push_back(trainer.warmup_epoch());
  for (int epoch = 1; epoch < cfg.epochs; ++epoch) {
    result.log.epochs.push_back(trainer.alternate_epoch(epoch));
  }
  trainer.refresh_statistics(cfg.epochs);
  result.net = trainer.net();
  result.stats = trainer.live_stats();
  result.holdout = std::move(holdout);
  result.audit = trainer.audit();
  result.momentum_updates = trainer.momentum_updates();
  return result;
}

}  // namespace mshift
