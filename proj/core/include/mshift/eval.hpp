#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mshift/dataset.hpp"
#include "mshift/distance.hpp"
#include "mshift/model.hpp"

namespace mshift {

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  /// NaN for a class with neither instances nor predictions (excluded from
  /// the macro average); 0 when a class is predicted but never present.
  std::vector<double> per_class_f1;
};

ClassificationMetrics classification_metrics(std::span<const int> predicted,
                                             std::span<const int> truth, int num_classes);

std::vector<int> argmax_rows(const Tensor2& probabilities);

struct EvalReport {
  double target_accuracy = 0.0;
  double target_macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  /// [i][m]: accuracy of source m's held-out samples routed through branch i.
  Tensor2 branch_confusion;
  /// [i][k]: squared MMD between source i and target class-k adaptor outputs
  /// of branch i (true target labels). NaN when a side has < 2 samples.
  Tensor2 classwise_mmd;
  std::vector<double> weight_mean;  // per source, over target test samples
  std::vector<double> weight_std;

  /// Mean diagonal minus mean off-diagonal of branch_confusion.
  double confusion_gap() const;
  /// Mean of the finite classwise_mmd entries of branch i.
  double mean_classwise_mmd(int branch) const;
};

/// Ensemble prediction on the live model with the given per-source
/// statistics (fitted on encoder outputs).
EnsembleOutput predict_target(const DaNet& net, std::span<const GaussianStats> stats,
                              const Tensor2& x);

/// Fills every EvalReport field. `source_holdout` supplies the per-source
/// samples for the branch-confusion and class-wise MMD diagnostics; when
/// empty the bundle's source sets are used.
EvalReport evaluate(const DaNet& net, const DatasetBundle& bundle,
                    std::span<const GaussianStats> stats,
                    std::span<const SampleSet> source_holdout = {});

/// Accuracy matrix of every source set routed through every branch.
Tensor2 branch_confusion(const DaNet& net, std::span<const SampleSet> sources);

struct DumpOptions {
  std::size_t per_domain = 200;
  std::uint64_t seed = 1;
};

/// JSON-lines embedding dump: for a seeded subsample of each source and of
/// the target test set, one line for "h" and one "z" and "e" line per branch.
void dump_embeddings(const DaNet& net, const DatasetBundle& bundle,
                     std::span<const GaussianStats> stats, const std::filesystem::path& path,
                     const DumpOptions& options = {});

}  // namespace mshift
