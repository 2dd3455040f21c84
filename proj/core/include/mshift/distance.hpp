#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mshift/dataset.hpp"
#include "mshift/netcore.hpp"

namespace mshift {

class DaNet;

struct KernelConfig {
  enum class Mode { median_heuristic, fixed };
  Mode mode = Mode::median_heuristic;
  double sigma = 1.0;  // used only in fixed mode

  static KernelConfig median() { return {}; }
  static KernelConfig fixed(double s) { return {Mode::fixed, s}; }
};

void validate(const KernelConfig& kernel);

/// exp(-|a-b|^2 / (2 sigma^2)).
double gaussian_kernel(std::span<const double> a, std::span<const double> b, double sigma);

/// Median of the pairwise Euclidean distances over the pooled rows of xs
/// and ys (unordered pairs, no self-pairs). Falls back to 1.0 when the
/// median is zero.
double median_bandwidth(const Tensor2& xs, const Tensor2& ys);

/// Median bandwidth plus the pairs it was read from, so callers can
/// differentiate through it: sigma = sum(weight * |p_a - p_b|) over `pairs`
/// (indices into the pooled set, xs rows first). Empty when the fallback fired.
struct BandwidthChoice {
  double sigma = 1.0;
  std::vector<std::pair<std::pair<Index, Index>, double>> pairs;
};
BandwidthChoice choose_median_bandwidth(const Tensor2& xs, const Tensor2& ys);

/// Biased squared MMD with self-pairs included:
///   mean G(x,x') + mean G(y,y') - 2 mean G(x,y).
double mmd2(const Tensor2& xs, const Tensor2& ys, const KernelConfig& kernel);

struct Mmd2Grad {
  double value = 0.0;
  double sigma = 1.0;
  Tensor2 grad_x;
  Tensor2 grad_y;
};

/// mmd2 together with its gradient with respect to every row of xs and ys.
/// In median mode the gradient includes the bandwidth's dependence on the
/// inputs.
Mmd2Grad mmd2_with_grad(const Tensor2& xs, const Tensor2& ys, const KernelConfig& kernel);

struct AlphaResult {
  Tensor2 alpha;                   // M x M, symmetric, zero diagonal
  std::vector<Tensor2> encodings;  // per-source subsample of encoder outputs h
};

/// Inter-source MMD on shared-encoder outputs of seeded subsamples
/// (`subsample` rows per source, or all rows when smaller).
AlphaResult source_pair_alpha(const DaNet& net, std::span<const SampleSet> sources,
                              std::size_t subsample, std::uint64_t seed,
                              const KernelConfig& kernel = KernelConfig::median());

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd inv_cov;
  double shrinkage = 0.0;
  std::size_t sample_count = 0;
};

/// Mean and inverse of the shrunk covariance (1-l)S + l*diag(tr(S)/d), with
/// S the sample covariance (denominator n-1).
GaussianStats fit_gaussian_stats(const Tensor2& encodings, double shrinkage);

/// Negative Mahalanobis distance, larger means closer. A numerically
/// negative quadratic form is clamped to zero and flagged via `clamped`.
double mahalanobis_score(std::span<const double> x, const GaussianStats& stats,
                         bool* clamped = nullptr);

/// Softmax over the scores.
std::vector<double> ensemble_weights(std::span<const double> betas);

}  // namespace mshift
