#include "mshift/eval.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "mshift/error.hpp"
#include "mshift/random.hpp"

namespace mshift {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<int> labels_of(const SampleSet& set) {
  std::vector<int> out;
  out.reserve(set.size());
  for (const auto& s : set) {
    if (!s.label) throw ContractError("evaluation needs labelled samples");
    out.push_back(*s.label);
  }
  return out;
}

double accuracy_of(std::span<const int> predicted, std::span<const int> truth) {
  std::size_t hits = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) hits += predicted[k] == truth[k] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::string format_double(double v) {
  if (!std::isfinite(v)) return "null";
  return fmt::format("{:.17g}", v);
}

void write_vector(std::ostream& out, const Tensor2& m, Index row) {
  out << '[';
  for (Index c = 0; c < m.cols(); ++c) {
    if (c > 0) out << ',';
    out << format_double(m(row, c));
  }
  out << ']';
}

}  // namespace

ClassificationMetrics classification_metrics(std::span<const int> predicted,
                                             std::span<const int> truth, int num_classes) {
  if (truth.empty()) throw ContractError("metrics need at least one sample");
  if (predicted.size() != truth.size()) {
    throw DimensionError(fmt::format("{} predictions for {} labels", predicted.size(), truth.size()));
  }
  const auto K = static_cast<std::size_t>(num_classes);
  std::vector<double> tp(K, 0.0), fp(K, 0.0), fn(K, 0.0);
  for (std::size_t j = 0; j < truth.size(); ++j) {
    const auto y = static_cast<std::size_t>(truth[j]);
    const auto p = static_cast<std::size_t>(predicted[j]);
    if (y == p) {
      tp[y] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[y] += 1.0;
    }
  }
  ClassificationMetrics m;
  m.accuracy = accuracy_of(predicted, truth);
  m.per_class_f1.assign(K, kNaN);
  double sum = 0.0;
  int counted = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const double denom = 2.0 * tp[k] + fp[k] + fn[k];
    if (denom == 0.0) continue;
    m.per_class_f1[k] = 2.0 * tp[k] / denom;
    sum += m.per_class_f1[k];
    ++counted;
  }
  m.macro_f1 = counted > 0 ? sum / counted : 0.0;
  return m;
}

std::vector<int> argmax_rows(const Tensor2& probabilities) {
  std::vector<int> out(static_cast<std::size_t>(probabilities.rows()));
  for (Index r = 0; r < probabilities.rows(); ++r) {
    Index best = 0;
    probabilities.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double EvalReport::confusion_gap() const {
  const Index M = branch_confusion.rows();
  if (M < 2) return 0.0;
  double diag = 0.0;
  double off = 0.0;
  for (Index i = 0; i < M; ++i) {
    for (Index m = 0; m < M; ++m) (i == m ? diag : off) += branch_confusion(i, m);
  }
  return diag / static_cast<double>(M) - off / static_cast<double>(M * (M - 1));
}

double EvalReport::mean_classwise_mmd(int branch) const {
  double sum = 0.0;
  int n = 0;
  for (Index k = 0; k < classwise_mmd.cols(); ++k) {
    const double v = classwise_mmd(branch, k);
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  }
  return n > 0 ? sum / n : kNaN;
}

EnsembleOutput predict_target(const DaNet& net, std::span<const GaussianStats> stats,
                              const Tensor2& x) {
  return ensemble_forward(net, stats, x);
}

Tensor2 branch_confusion(const DaNet& net, std::span<const SampleSet> sources) {
  const int M = net.num_sources();
  if (static_cast<int>(sources.size()) != M) {
    throw ContractError(fmt::format("branch confusion needs {} source sets, got {}", M, sources.size()));
  }
  Tensor2 out = Tensor2::Zero(M, M);
  for (int m = 0; m < M; ++m) {
    const SampleSet& set = sources[static_cast<std::size_t>(m)];
    if (set.empty()) throw ContractError(fmt::format("source {} has no held-out samples", m));
    const auto truth = labels_of(set);
    const Tensor2 h = encode(net, features_matrix(set), EncodeMode::eval());
    for (int i = 0; i < M; ++i) {
      out(i, m) = accuracy_of(argmax_rows(branch_forward(net, i, h).p), truth);
    }
  }
  return out;
}

EvalReport evaluate(const DaNet& net, const DatasetBundle& bundle,
                    std::span<const GaussianStats> stats,
                    std::span<const SampleSet> source_holdout) {
  if (bundle.target_test.empty()) throw ContractError("target test set is empty");
  const std::span<const SampleSet> sources =
      source_holdout.empty() ? std::span<const SampleSet>(bundle.sources) : source_holdout;
  const int M = net.num_sources();
  const int K = net.num_classes();

  EvalReport report;
  const Tensor2 xt = features_matrix(bundle.target_test);
  const auto truth = labels_of(bundle.target_test);
  const EnsembleOutput ens = predict_target(net, stats, xt);
  const auto metrics = classification_metrics(argmax_rows(ens.probabilities), truth, K);
  report.target_accuracy = metrics.accuracy;
  report.target_macro_f1 = metrics.macro_f1;
  report.per_class_f1 = metrics.per_class_f1;

  report.weight_mean.resize(static_cast<std::size_t>(M));
  report.weight_std.resize(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    const auto col = ens.weights.col(i);
    const double mean = col.mean();
    const double var = (col.array() - mean).square().mean();
    report.weight_mean[static_cast<std::size_t>(i)] = mean;
    report.weight_std[static_cast<std::size_t>(i)] = std::sqrt(var);
  }

  report.branch_confusion = branch_confusion(net, sources);

  report.classwise_mmd = Tensor2::Constant(M, K, kNaN);
  const Tensor2 ht = encode(net, xt, EncodeMode::eval());
  for (int i = 0; i < M; ++i) {
    const SampleSet& src = sources[static_cast<std::size_t>(i)];
    const auto src_truth = labels_of(src);
    const Tensor2 es = branch_forward(net, i, encode(net, features_matrix(src), EncodeMode::eval())).e;
    const Tensor2 et = branch_forward(net, i, ht).e;
    for (int k = 0; k < K; ++k) {
      std::vector<Index> sr;
      std::vector<Index> tr;
      for (std::size_t j = 0; j < src_truth.size(); ++j) {
        if (src_truth[j] == k) sr.push_back(static_cast<Index>(j));
      }
      for (std::size_t j = 0; j < truth.size(); ++j) {
        if (truth[j] == k) tr.push_back(static_cast<Index>(j));
      }
      if (sr.size() < 2 || tr.size() < 2) continue;
      Tensor2 a(static_cast<Index>(sr.size()), es.cols());
      Tensor2 b(static_cast<Index>(tr.size()), et.cols());
      for (std::size_t r = 0; r < sr.size(); ++r) a.row(static_cast<Index>(r)) = es.row(sr[r]);
      for (std::size_t r = 0; r < tr.size(); ++r) b.row(static_cast<Index>(r)) = et.row(tr[r]);
      report.classwise_mmd(i, k) = mmd2(a, b, KernelConfig::median());
    }
  }
  return report;
}

void dump_embeddings(const DaNet& net, const DatasetBundle& bundle,
                     std::span<const GaussianStats> stats, const std::filesystem::path& path,
                     const DumpOptions& options) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  const int M = net.num_sources();

  auto dump_set = [&](const SampleSet& set, const char* split, bool with_pseudo, std::uint64_t stream) {
    if (set.empty()) return;
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(options.seed, stream));
    fisher_yates(order, rng);
    order.resize(std::min(order.size(), options.per_domain));
    const Batch batch = make_batch(set, order);
    const Tensor2 h = encode(net, batch.x, EncodeMode::eval());
    std::vector<int> pseudo;
    if (with_pseudo) pseudo = argmax_rows(predict_target(net, stats, batch.x).probabilities);
    std::vector<BranchOutput> outs;
    for (int i = 0; i < M; ++i) outs.push_back(branch_forward(net, i, h));

    for (std::size_t r = 0; r < order.size(); ++r) {
      const Sample& s = set[order[r]];
      const auto row = static_cast<Index>(r);
      const std::string head = fmt::format(
          "{{\"domain\":{},\"split\":\"{}\",\"label\":{},\"pseudo\":{},", s.domain, split,
          s.label ? std::to_string(*s.label) : "null",
          with_pseudo ? std::to_string(pseudo[r]) : "null");
      out << head << "\"layer\":\"h\",\"branch\":null,\"vector\":";
      write_vector(out, h, row);
      out << "}\n";
      for (int i = 0; i < M; ++i) {
        out << head << "\"layer\":\"z\",\"branch\":" << i << ",\"vector\":";
        write_vector(out, outs[static_cast<std::size_t>(i)].z, row);
        out << "}\n";
        out << head << "\"layer\":\"e\",\"branch\":" << i << ",\"vector\":";
        write_vector(out, outs[static_cast<std::size_t>(i)].e, row);
        out << "}\n";
      }
    }
  };

  for (int i = 0; i < bundle.num_sources(); ++i) {
    dump_set(bundle.sources[static_cast<std::size_t>(i)], "source", false, static_cast<std::uint64_t>(i));
  }
  dump_set(bundle.target_test, "target_test", true, static_cast<std::uint64_t>(bundle.num_sources()));
  out.flush();
  if (!out) throw IoError(fmt::format("failed while writing '{}'", path.string()));
}

}  // namespace mshift
