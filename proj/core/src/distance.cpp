#include "mshift/distance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "mshift/error.hpp"
#include "mshift/model.hpp"
#include "mshift/random.hpp"

namespace mshift {

namespace {

double squared_distance(const double* a, const double* b, Index d) {
  double acc = 0.0;
  for (Index k = 0; k < d; ++k) {
    const double diff = a[k] - b[k];
    acc += diff * diff;
  }
  return acc;
}

// Row-pairwise squared distances between a and b.
Tensor2 pairwise_sq(const Tensor2& a, const Tensor2& b) {
  Tensor2 out(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) {
      out(i, j) = squared_distance(a.row(i).data(), b.row(j).data(), a.cols());
    }
  }
  return out;
}

const double* pooled_row(const Tensor2& xs, const Tensor2& ys, Index k) {
  return k < xs.rows() ? xs.row(k).data() : ys.row(k - xs.rows()).data();
}

void check_sets(const Tensor2& xs, const Tensor2& ys) {
  if (xs.rows() == 0 || ys.rows() == 0) throw ContractError("mmd2 needs two non-empty sets");
  if (xs.cols() != ys.cols()) {
    throw DimensionError(fmt::format("mmd2 sets differ in width: {} vs {}", shape_string(xs),
                                     shape_string(ys)));
  }
}

double resolve_sigma(const Tensor2& xs, const Tensor2& ys, const KernelConfig& kernel) {
  validate(kernel);
  return kernel.mode == KernelConfig::Mode::fixed ? kernel.sigma : median_bandwidth(xs, ys);
}

}  // namespace

void validate(const KernelConfig& kernel) {
  if (kernel.mode == KernelConfig::Mode::fixed && !(kernel.sigma > 0.0)) {
    throw ConfigError(fmt::format("fixed kernel bandwidth must be > 0, got {}", kernel.sigma));
  }
}

double gaussian_kernel(std::span<const double> a, std::span<const double> b, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError(fmt::format("kernel bandwidth must be > 0, got {}", sigma));
  if (a.size() != b.size()) {
    throw DimensionError(fmt::format("kernel arguments differ in size: {} vs {}", a.size(), b.size()));
  }
  const double r2 = squared_distance(a.data(), b.data(), static_cast<Index>(a.size()));
  return std::exp(-r2 / (2.0 * sigma * sigma));
}

BandwidthChoice choose_median_bandwidth(const Tensor2& xs, const Tensor2& ys) {
  const Index n = xs.rows() + ys.rows();
  if (n < 2) throw ContractError("median bandwidth needs at least 2 vectors");
  if (xs.rows() > 0 && ys.rows() > 0 && xs.cols() != ys.cols()) {
    throw DimensionError("median bandwidth sets differ in width");
  }
  const Index d = xs.rows() > 0 ? xs.cols() : ys.cols();
  struct Pair {
    double dist;
    Index a;
    Index b;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index a = 0; a < n; ++a) {
    for (Index b = a + 1; b < n; ++b) {
      pairs.push_back({std::sqrt(squared_distance(pooled_row(xs, ys, a), pooled_row(xs, ys, b), d)), a, b});
    }
  }
  auto less = [](const Pair& l, const Pair& r) {
    if (l.dist != r.dist) return l.dist < r.dist;
    if (l.a != r.a) return l.a < r.a;
    return l.b < r.b;
  };
  const std::size_t count = pairs.size();
  const std::size_t hi = count / 2;
  std::nth_element(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(hi), pairs.end(), less);
  BandwidthChoice choice;
  if (count % 2 == 1) {
    choice.sigma = pairs[hi].dist;
    choice.pairs.push_back({{pairs[hi].a, pairs[hi].b}, 1.0});
  } else {
    const Pair upper = pairs[hi];
    const Pair lower = *std::max_element(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(hi), less);
    choice.sigma = 0.5 * (lower.dist + upper.dist);
    choice.pairs.push_back({{lower.a, lower.b}, 0.5});
    choice.pairs.push_back({{upper.a, upper.b}, 0.5});
  }
  if (!(choice.sigma > 0.0)) {
    choice.sigma = 1.0;
    choice.pairs.clear();
  }
  return choice;
}

double median_bandwidth(const Tensor2& xs, const Tensor2& ys) {
  return choose_median_bandwidth(xs, ys).sigma;
}

double mmd2(const Tensor2& xs, const Tensor2& ys, const KernelConfig& kernel) {
  check_sets(xs, ys);
  const double sigma = resolve_sigma(xs, ys, kernel);
  const double scale = -1.0 / (2.0 * sigma * sigma);
  auto mean_kernel = [&](const Tensor2& a, const Tensor2& b) {
    double acc = 0.0;
    for (Index i = 0; i < a.rows(); ++i) {
      for (Index j = 0; j < b.rows(); ++j) {
        acc += std::exp(scale * squared_distance(a.row(i).data(), b.row(j).data(), a.cols()));
      }
    }
    return acc / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
  };
  return mean_kernel(xs, xs) + mean_kernel(ys, ys) - 2.0 * mean_kernel(xs, ys);
}

Mmd2Grad mmd2_with_grad(const Tensor2& xs, const Tensor2& ys, const KernelConfig& kernel) {
  check_sets(xs, ys);
  validate(kernel);
  BandwidthChoice bw;
  if (kernel.mode == KernelConfig::Mode::fixed) {
    bw.sigma = kernel.sigma;
  } else {
    bw = choose_median_bandwidth(xs, ys);
  }
  const double sigma = bw.sigma;
  const double s2 = sigma * sigma;
  const auto n = static_cast<double>(xs.rows());
  const auto m = static_cast<double>(ys.rows());

  const Tensor2 dxx = pairwise_sq(xs, xs);
  const Tensor2 dyy = pairwise_sq(ys, ys);
  const Tensor2 dxy = pairwise_sq(xs, ys);
  const Tensor2 kxx = (dxx.array() * (-1.0 / (2.0 * s2))).exp().matrix();
  const Tensor2 kyy = (dyy.array() * (-1.0 / (2.0 * s2))).exp().matrix();
  const Tensor2 kxy = (dxy.array() * (-1.0 / (2.0 * s2))).exp().matrix();

  const double cxx = 1.0 / (n * n);
  const double cyy = 1.0 / (m * m);
  const double cxy = -2.0 / (n * m);

  Mmd2Grad out;
  out.sigma = sigma;
  out.value = cxx * kxx.sum() + cyy * kyy.sum() + cxy * kxy.sum();

  // d/da exp(-|a-b|^2 / 2s^2) = -K (a-b) / s^2; within-set pairs count twice.
  auto within = [&](const Tensor2& pts, const Tensor2& k, double coef) {
    const Eigen::VectorXd rowsum = k.rowwise().sum();
    Tensor2 g = rowsum.asDiagonal() * pts - k * pts;
    return Tensor2(g * (-2.0 * coef / s2));
  };
  out.grad_x = within(xs, kxx, cxx);
  out.grad_y = within(ys, kyy, cyy);
  {
    const Eigen::VectorXd row = kxy.rowwise().sum();
    const Eigen::VectorXd col = kxy.colwise().sum().transpose();
    out.grad_x += (row.asDiagonal() * xs - kxy * ys) * (-cxy / s2);
    out.grad_y += (col.asDiagonal() * ys - kxy.transpose() * xs) * (-cxy / s2);
  }

  if (!bw.pairs.empty()) {
    // dK/dsigma = K r^2 / sigma^3
    const double s3 = s2 * sigma;
    const double dsigma = (cxx * (kxx.array() * dxx.array()).sum() +
                           cyy * (kyy.array() * dyy.array()).sum() +
                           cxy * (kxy.array() * dxy.array()).sum()) /
                          s3;
    const Index d = xs.cols();
    for (const auto& [pair, weight] : bw.pairs) {
      const auto [a, b] = pair;
      const double* pa = pooled_row(xs, ys, a);
      const double* pb = pooled_row(xs, ys, b);
      const double dist = std::sqrt(squared_distance(pa, pb, d));
      if (dist == 0.0) continue;
      const double coef = dsigma * weight / dist;
      for (Index k = 0; k < d; ++k) {
        const double g = coef * (pa[k] - pb[k]);
        (a < xs.rows() ? out.grad_x(a, k) : out.grad_y(a - xs.rows(), k)) += g;
        (b < xs.rows() ? out.grad_x(b, k) : out.grad_y(b - xs.rows(), k)) -= g;
      }
    }
  }
  return out;
}

AlphaResult source_pair_alpha(const DaNet& net, std::span<const SampleSet> sources,
                              std::size_t subsample, std::uint64_t seed,
                              const KernelConfig& kernel) {
  const auto M = static_cast<Index>(sources.size());
  AlphaResult result;
  result.alpha = Tensor2::Zero(M, M);
  for (Index i = 0; i < M; ++i) {
    const SampleSet& src = sources[static_cast<std::size_t>(i)];
    if (src.empty()) throw ContractError(fmt::format("source {} has no samples for alpha", i));
    std::vector<std::size_t> order(src.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    fisher_yates(order, rng);
    order.resize(std::min(order.size(), subsample));
    std::sort(order.begin(), order.end());
    const Batch batch = make_batch(src, order);
    result.encodings.push_back(encode(net, batch.x, EncodeMode::eval()));
  }
  for (Index i = 0; i < M; ++i) {
    for (Index m = i + 1; m < M; ++m) {
      const double v = mmd2(result.encodings[static_cast<std::size_t>(i)],
                            result.encodings[static_cast<std::size_t>(m)], kernel);
      result.alpha(i, m) = v;
      result.alpha(m, i) = v;
    }
  }
  return result;
}

GaussianStats fit_gaussian_stats(const Tensor2& encodings, double shrinkage) {
  const Index n = encodings.rows();
  const Index d = encodings.cols();
  if (n < 2) throw ContractError("Gaussian statistics need at least 2 encodings");
  if (shrinkage < 0.0 || shrinkage > 1.0) throw ConfigError("shrinkage must lie in [0, 1]");
  GaussianStats stats;
  stats.shrinkage = shrinkage;
  stats.sample_count = static_cast<std::size_t>(n);
  stats.mean = encodings.colwise().mean().transpose();
  const Eigen::MatrixXd centered = encodings.rowwise() - stats.mean.transpose();
  const Eigen::MatrixXd sample_cov = centered.transpose() * centered / static_cast<double>(n - 1);
  const double avg_var = sample_cov.trace() / static_cast<double>(d);
  Eigen::MatrixXd reg = (1.0 - shrinkage) * sample_cov;
  reg.diagonal().array() += shrinkage * avg_var;

  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    // LLT only checks pivots are positive; reject near-singular matrices too.
    const double max_diag = reg.diagonal().cwiseAbs().maxCoeff();
    const double min_pivot = llt.matrixL().toDenseMatrix().diagonal().minCoeff();
    ok = max_diag > 0.0 && min_pivot * min_pivot > 1e-12 * max_diag;
  }
  if (!ok) {
    throw NumericalError(fmt::format(
        "covariance of {} encodings (dim {}) is not invertible at shrinkage {}; use shrinkage > 0",
        n, d, shrinkage));
  }
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
  stats.inv_cov = 0.5 * (inv + inv.transpose());
  return stats;
}

double mahalanobis_score(std::span<const double> x, const GaussianStats& stats, bool* clamped) {
  const auto d = static_cast<Index>(x.size());
  if (d != stats.mean.size()) {
    throw DimensionError(fmt::format("Mahalanobis input has dim {}, statistics have dim {}", d,
                                     stats.mean.size()));
  }
  const Eigen::VectorXd diff = Eigen::Map<const Eigen::VectorXd>(x.data(), d) - stats.mean;
  double q = diff.dot(stats.inv_cov * diff);
  if (clamped != nullptr) *clamped = false;
  if (q < 0.0) {
    if (clamped != nullptr) *clamped = true;
    q = 0.0;
  }
  return -std::sqrt(q);
}

std::vector<double> ensemble_weights(std::span<const double> betas) {
  if (betas.empty()) throw ContractError("ensemble_weights needs at least one score");
  const double shift = *std::max_element(betas.begin(), betas.end());
  std::vector<double> w(betas.size());
  double total = 0.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    w[i] = std::exp(betas[i] - shift);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace mshift
