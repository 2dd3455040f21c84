#include "mshift/losses.hpp"

#include <cmath>
#include <map>

#include <fmt/format.h>

#include "mshift/error.hpp"
#include "mshift/parallel.hpp"
#include "mshift/random.hpp"

namespace mshift {

namespace {

// Forward record of one batch through the encoder and branch i.
struct Pass {
  EncoderTrace enc;
  Tensor2 h;
  BranchTrace branch;
  BranchOutput out;
};

Pass run_pass(const DaNet& net, int i, const Batch& batch, EncodeMode mode, bool trace_encoder) {
  Pass pass;
  pass.h = encode(net, batch.x, stream_mode(mode, batch.domain), trace_encoder ? &pass.enc : nullptr);
  pass.out = branch_forward(net, i, pass.h, &pass.branch);
  return pass;
}

const BranchNet& branch_of(const DaNet& net, int i) {
  if (i < 0 || i >= net.num_sources()) {
    throw ContractError(fmt::format("branch index {} out of range [0, {})", i, net.num_sources()));
  }
  return net.branches[static_cast<std::size_t>(i)];
}

void require_labels(const Batch& batch, const char* what) {
  if (!batch.labelled()) throw ContractError(fmt::format("{} needs a labelled batch", what));
  for (int y : batch.labels) {
    if (y < 0) throw ContractError(fmt::format("{} needs every sample labelled", what));
  }
}

// Mean cross-entropy term and dL/dlogits scaled by 1/normaliser.
double ce_terms(const Tensor2& logits, std::span<const int> labels, double normaliser,
                const Tensor2& p, Tensor2& grad_logits) {
  double total = 0.0;
  grad_logits = p / normaliser;
  for (Index r = 0; r < logits.rows(); ++r) {
    const double shift = logits.row(r).maxCoeff();
    const double lse = shift + std::log((logits.row(r).array() - shift).exp().sum());
    const int y = labels[static_cast<std::size_t>(r)];
    total -= logits(r, y) - lse;
    grad_logits(r, y) -= 1.0 / normaliser;
  }
  return total / normaliser;
}

void add_zero_grad(GradMap& grads, const ParamTensor& p) {
  accumulate(grads, p.id, Tensor2::Zero(p.value.rows(), p.value.cols()));
}

// Backpropagates dL/de of a pass through adaptor i (recorded), the
// disentangler (not recorded) and the encoder (recorded).
void backprop_from_e(const DaNet& net, int i, const Pass& pass, const Tensor2& grad_e,
                     GradMap& grads) {
  const BranchNet& b = branch_of(net, i);
  const Tensor2 grad_z = b.adaptor.backward(pass.branch.adaptor, grad_e, &grads);
  const Tensor2 grad_h = b.disentangler.backward(pass.branch.disentangler, grad_z, nullptr);
  encode_backward(net, pass.enc, grad_h, &grads);
}

// Rows of `e` whose label equals k.
Tensor2 gather_rows(const Tensor2& e, std::span<const Index> rows) {
  Tensor2 out(static_cast<Index>(rows.size()), e.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = e.row(rows[r]);
  return out;
}

void scatter_rows(Tensor2& grad, std::span<const Index> rows, const Tensor2& g, double scale) {
  for (std::size_t r = 0; r < rows.size(); ++r) grad.row(rows[r]) += scale * g.row(static_cast<Index>(r));
}

std::vector<std::vector<Index>> rows_by_class(const Batch& batch, int num_classes) {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(num_classes));
  for (std::size_t r = 0; r < batch.labels.size(); ++r) {
    const int y = batch.labels[r];
    if (y >= 0 && y < num_classes) out[static_cast<std::size_t>(y)].push_back(static_cast<Index>(r));
  }
  return out;
}

LossResult sum_results(std::vector<LossResult>& parts) {
  LossResult total;
  total.skipped = true;
  for (auto& part : parts) {
    total.value += part.value;
    accumulate(total.grads, part.grads);
    total.skipped = total.skipped && part.skipped;
  }
  return total;
}

}  // namespace

EncodeMode stream_mode(EncodeMode mode, int domain) {
  if (!mode.train) return mode;
  return EncodeMode::training(mix_seed(mode.seed, static_cast<std::uint64_t>(domain)));
}

LossResult loss_ce(const DaNet& net, std::span<const Batch> batches, EncodeMode mode) {
  if (static_cast<int>(batches.size()) != net.num_sources()) {
    throw ContractError(fmt::format("loss_ce needs one batch per source ({}), got {}",
                                    net.num_sources(), batches.size()));
  }
  double total_count = 0.0;
  for (const auto& b : batches) {
    if (b.size() == 0) continue;
    require_labels(b, "loss_ce");
    total_count += static_cast<double>(b.size());
  }
  if (total_count == 0.0) throw ContractError("loss_ce needs at least one non-empty batch");

  LossResult result;
  for (int i = 0; i < net.num_sources(); ++i) {
    const Batch& batch = batches[static_cast<std::size_t>(i)];
    if (batch.size() == 0) continue;
    const BranchNet& b = branch_of(net, i);
    const Pass pass = run_pass(net, i, batch, mode, true);
    Tensor2 grad_logits;
    result.value += ce_terms(pass.branch.classifier.pre, batch.labels, total_count, pass.out.p, grad_logits);
    const Tensor2 grad_e = b.classifier.backward(pass.branch.classifier, grad_logits, &result.grads);
    const Tensor2 grad_z = b.adaptor.backward(pass.branch.adaptor, grad_e, &result.grads);
    const Tensor2 grad_h = b.disentangler.backward(pass.branch.disentangler, grad_z, &result.grads);
    encode_backward(net, pass.enc, grad_h, &result.grads);
  }
  return result;
}

LossResult loss_fcd_max(const DaNet& net, int i, const Batch& batch, EncodeMode mode) {
  const BranchNet& b = branch_of(net, i);
  require_labels(batch, "loss_fcd_max");
  if (batch.size() == 0) throw ContractError("loss_fcd_max needs a non-empty batch");
  const Pass pass = run_pass(net, i, batch, mode, false);
  LossResult result;
  Tensor2 grad_logits;
  result.value = ce_terms(pass.branch.classifier.pre, batch.labels, static_cast<double>(batch.size()),
                          pass.out.p, grad_logits);
  const Tensor2 grad_e = b.classifier.backward(pass.branch.classifier, grad_logits, nullptr);
  const Tensor2 grad_z = b.adaptor.backward(pass.branch.adaptor, grad_e, nullptr);
  b.disentangler.backward(pass.branch.disentangler, grad_z, &result.grads);
  return result;
}

LossResult loss_fcd_min(const DaNet& net, int i, const Batch& batch, std::span<const double> alpha,
                        EncodeMode mode) {
  const BranchNet& own = branch_of(net, i);
  const int M = net.num_sources();
  if (static_cast<int>(alpha.size()) != M - 1) {
    throw ContractError(fmt::format("loss_fcd_min needs {} alpha values, got {}", M - 1, alpha.size()));
  }
  for (double a : alpha) {
    if (!(a >= 0.0)) throw ContractError("alpha values must be non-negative");
  }
  if (batch.size() == 0) throw ContractError("loss_fcd_min needs a non-empty batch");

  const Tensor2 h = encode(net, batch.x, stream_mode(mode, batch.domain));
  DenseCache dis_cache;
  const Tensor2 z = own.disentangler.forward(h, &dis_cache);
  const int K = net.num_classes();
  const double q = 1.0 / K;
  const double norm = static_cast<double>(M) * static_cast<double>(batch.size());

  LossResult result;
  Tensor2 grad_z = Tensor2::Zero(z.rows(), z.cols());
  std::size_t k = 0;
  for (int m = 0; m < M; ++m) {
    if (m == i) continue;
    const double a = alpha[k++];
    const BranchNet& other = net.branches[static_cast<std::size_t>(m)];
    DenseCache ada_cache;
    DenseCache cls_cache;
    const Tensor2 e = other.adaptor.forward(z, &ada_cache);
    const Tensor2 p = softmax_rows(other.classifier.forward(e, &cls_cache));
    const Tensor2 diff = p.array() - q;
    result.value += a / norm * diff.squaredNorm();
    if (a == 0.0) continue;
    const Tensor2 grad_p = (2.0 * a / norm) * diff;
    const Tensor2 grad_logits = softmax_rows_backward(p, grad_p);
    const Tensor2 grad_e = other.classifier.backward(cls_cache, grad_logits, nullptr);
    grad_z += other.adaptor.backward(ada_cache, grad_e, nullptr);
  }
  own.disentangler.backward(dis_cache, grad_z, &result.grads);
  return result;
}

LossResult loss_fcd_total(const DaNet& net, std::span<const Batch> batches, const Tensor2& alpha,
                          EncodeMode mode) {
  const int M = net.num_sources();
  if (static_cast<int>(batches.size()) != M) {
    throw ContractError(fmt::format("loss_fcd_total needs {} batches, got {}", M, batches.size()));
  }
  if (alpha.rows() != M || alpha.cols() != M) {
    throw ContractError(fmt::format("alpha matrix must be {}x{}, got {}", M, M, shape_string(alpha)));
  }
  LossResult result;
  for (int i = 0; i < M; ++i) {
    const Batch& batch = batches[static_cast<std::size_t>(i)];
    if (batch.size() == 0) continue;
    std::vector<double> row;
    for (int m = 0; m < M; ++m) {
      if (m != i) row.push_back(alpha(i, m));
    }
    const LossResult mx = loss_fcd_max(net, i, batch, mode);
    const LossResult mn = loss_fcd_min(net, i, batch, row, mode);
    result.value += mx.value + mn.value;
    accumulate(result.grads, mx.grads);
    accumulate(result.grads, mn.grads);
  }
  return result;
}

LossResult loss_ca(const DaNet& net, int i, const Batch& source, const Batch& target,
                   const AlignOptions& options, EncodeMode mode) {
  const BranchNet& b = branch_of(net, i);
  if (!(options.tau > 0.0)) throw ConfigError(fmt::format("temperature tau must be > 0, got {}", options.tau));
  validate(options.kernel);
  require_labels(source, "loss_ca (source side)");
  if (!target.labelled()) throw ContractError("loss_ca needs pseudo-labels on the target batch");

  const int K = net.num_classes();
  const auto src_rows = rows_by_class(source, K);
  const auto tgt_rows = rows_by_class(target, K);
  auto usable = [&](const std::vector<std::vector<Index>>& rows, int k) {
    return static_cast<int>(rows[static_cast<std::size_t>(k)].size()) >= options.min_class_count;
  };

  struct Plan {
    int k;
    std::vector<int> src_neg;
    std::vector<int> tgt_neg;
  };
  std::vector<Plan> plans;
  for (int k = 0; k < K; ++k) {
    if (!usable(src_rows, k) || !usable(tgt_rows, k)) continue;
    Plan plan{k, {}, {}};
    for (int o = 0; o < K; ++o) {
      if (o == k) continue;
      if (usable(src_rows, o)) plan.src_neg.push_back(o);
      if (usable(tgt_rows, o)) plan.tgt_neg.push_back(o);
    }
    if (plan.src_neg.empty() && plan.tgt_neg.empty()) continue;
    plans.push_back(std::move(plan));
  }

  LossResult result;
  if (plans.empty()) {
    result.skipped = true;
    return result;
  }

  const Pass sp = run_pass(net, i, source, mode, true);
  const Pass tp = run_pass(net, i, target, mode, true);
  const Tensor2& es = sp.out.e;
  const Tensor2& et = tp.out.e;
  std::vector<Tensor2> src_sets(static_cast<std::size_t>(K));
  std::vector<Tensor2> tgt_sets(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    src_sets[static_cast<std::size_t>(k)] = gather_rows(es, src_rows[static_cast<std::size_t>(k)]);
    tgt_sets[static_cast<std::size_t>(k)] = gather_rows(et, tgt_rows[static_cast<std::size_t>(k)]);
  }

  // Within-side distances are symmetric; compute each unordered pair once.
  std::map<std::pair<int, int>, Mmd2Grad> src_cache;
  std::map<std::pair<int, int>, Mmd2Grad> tgt_cache;
  auto within = [&](std::map<std::pair<int, int>, Mmd2Grad>& cache,
                    const std::vector<Tensor2>& sets, int a, int c) -> const Mmd2Grad& {
    const auto key = std::minmax(a, c);
    auto it = cache.find(key);
    if (it == cache.end()) {
      it = cache.emplace(key, mmd2_with_grad(sets[static_cast<std::size_t>(key.first)],
                                             sets[static_cast<std::size_t>(key.second)],
                                             options.kernel)).first;
    }
    return it->second;
  };

  Tensor2 grad_es = Tensor2::Zero(es.rows(), es.cols());
  Tensor2 grad_et = Tensor2::Zero(et.rows(), et.cols());
  const double tau = options.tau;
  for (const Plan& plan : plans) {
    const auto k = static_cast<std::size_t>(plan.k);
    const Mmd2Grad pos = mmd2_with_grad(src_sets[k], tgt_sets[k], options.kernel);
    double denom = 0.0;
    std::vector<std::pair<int, double>> src_terms;
    std::vector<std::pair<int, double>> tgt_terms;
    for (int o : plan.src_neg) {
      const double w = std::exp(-within(src_cache, src_sets, plan.k, o).value / tau);
      src_terms.emplace_back(o, w);
      denom += w;
    }
    for (int o : plan.tgt_neg) {
      const double w = std::exp(-within(tgt_cache, tgt_sets, plan.k, o).value / tau);
      tgt_terms.emplace_back(o, w);
      denom += w;
    }
    denom += options.epsilon;
    result.value += -std::log(2.0) + pos.value / tau + std::log(denom);

    scatter_rows(grad_es, src_rows[k], pos.grad_x, 1.0 / tau);
    scatter_rows(grad_et, tgt_rows[k], pos.grad_y, 1.0 / tau);
    auto push_negative = [&](const Mmd2Grad& g, int self, int other, double w,
                             const std::vector<std::vector<Index>>& rows, Tensor2& grad) {
      const double coef = -w / (tau * denom);
      const bool self_first = self < other;
      scatter_rows(grad, rows[static_cast<std::size_t>(self)], self_first ? g.grad_x : g.grad_y, coef);
      scatter_rows(grad, rows[static_cast<std::size_t>(other)], self_first ? g.grad_y : g.grad_x, coef);
    };
    for (const auto& [o, w] : src_terms) {
      push_negative(within(src_cache, src_sets, plan.k, o), plan.k, o, w, src_rows, grad_es);
    }
    for (const auto& [o, w] : tgt_terms) {
      push_negative(within(tgt_cache, tgt_sets, plan.k, o), plan.k, o, w, tgt_rows, grad_et);
    }
  }

  backprop_from_e(net, i, sp, grad_es, result.grads);
  backprop_from_e(net, i, tp, grad_et, result.grads);
  add_zero_grad(result.grads, b.classifier.weights);
  add_zero_grad(result.grads, b.classifier.bias);
  return result;
}

LossResult loss_cpa(const DaNet& net, std::span<const Batch> sources, const Batch& target,
                    const AlignOptions& options, EncodeMode mode) {
  const int M = net.num_sources();
  if (static_cast<int>(sources.size()) != M) {
    throw ContractError(fmt::format("loss_cpa needs {} source batches, got {}", M, sources.size()));
  }
  std::vector<LossResult> parts(static_cast<std::size_t>(M));
  parallel_for(static_cast<std::size_t>(M), [&](std::size_t i) {
    parts[i] = loss_ca(net, static_cast<int>(i), sources[i], target, options, mode);
  });
  return sum_results(parts);
}

LossResult loss_cpa_language(const DaNet& net, std::span<const Batch> sources,
                             const Batch& target, const KernelConfig& kernel, EncodeMode mode) {
  const int M = net.num_sources();
  if (static_cast<int>(sources.size()) != M) {
    throw ContractError(fmt::format("loss_cpa_language needs {} source batches, got {}", M,
                                    sources.size()));
  }
  if (target.size() == 0) throw ContractError("loss_cpa_language needs a non-empty target batch");
  std::vector<LossResult> parts(static_cast<std::size_t>(M));
  parallel_for(static_cast<std::size_t>(M), [&](std::size_t idx) {
    const int i = static_cast<int>(idx);
    const Batch& source = sources[idx];
    if (source.size() == 0) throw ContractError("loss_cpa_language needs non-empty source batches");
    const Pass sp = run_pass(net, i, source, mode, true);
    const Pass tp = run_pass(net, i, target, mode, true);
    const Mmd2Grad g = mmd2_with_grad(sp.out.e, tp.out.e, kernel);
    LossResult part;
    part.value = g.value;
    backprop_from_e(net, i, sp, g.grad_x, part.grads);
    backprop_from_e(net, i, tp, g.grad_y, part.grads);
    parts[idx] = std::move(part);
  });
  LossResult total = sum_results(parts);
  total.skipped = false;
  return total;
}

LossResult loss_scl(const DaNet& net, int i, const Batch& source, const Batch& target, double tau,
                    EncodeMode mode) {
  const BranchNet& b = branch_of(net, i);
  if (!(tau > 0.0)) throw ConfigError(fmt::format("temperature tau must be > 0, got {}", tau));
  require_labels(source, "loss_scl (source side)");
  if (!target.labelled()) throw ContractError("loss_scl needs pseudo-labels on the target batch");

  const Pass sp = run_pass(net, i, source, mode, true);
  const Pass tp = run_pass(net, i, target, mode, true);

  // Joint batch: all source rows, then target rows with a usable label.
  struct Row {
    bool from_source;
    Index row;
    int label;
  };
  std::vector<Row> rows;
  for (Index r = 0; r < source.size(); ++r) rows.push_back({true, r, source.labels[static_cast<std::size_t>(r)]});
  for (Index r = 0; r < target.size(); ++r) {
    const int y = target.labels[static_cast<std::size_t>(r)];
    if (y >= 0) rows.push_back({false, r, y});
  }
  const auto n = static_cast<Index>(rows.size());
  const Index width = sp.out.e.cols();
  constexpr double kNormEps = 1e-12;

  Tensor2 e(n, width);
  for (Index a = 0; a < n; ++a) {
    const Row& row = rows[static_cast<std::size_t>(a)];
    e.row(a) = row.from_source ? sp.out.e.row(row.row) : tp.out.e.row(row.row);
  }
  const Eigen::VectorXd radius = (e.rowwise().squaredNorm().array() + kNormEps).sqrt();
  Tensor2 u = radius.cwiseInverse().asDiagonal() * e;
  const Tensor2 sim = (u * u.transpose()) / tau;

  int anchors = 0;
  for (Index a = 0; a < n; ++a) {
    for (Index c = 0; c < n; ++c) {
      if (c != a && rows[static_cast<std::size_t>(c)].label == rows[static_cast<std::size_t>(a)].label) {
        ++anchors;
        break;
      }
    }
  }
  LossResult result;
  if (anchors == 0) {
    result.skipped = true;
    return result;
  }

  // dL/dsim
  Tensor2 coef = Tensor2::Zero(n, n);
  for (Index a = 0; a < n; ++a) {
    double all = 0.0;
    double pos = 0.0;
    for (Index c = 0; c < n; ++c) {
      if (c == a) continue;
      const double w = std::exp(sim(a, c));
      all += w;
      if (rows[static_cast<std::size_t>(c)].label == rows[static_cast<std::size_t>(a)].label) pos += w;
    }
    if (pos == 0.0) continue;
    result.value += (-std::log(pos) + std::log(all)) / anchors;
    for (Index c = 0; c < n; ++c) {
      if (c == a) continue;
      const double w = std::exp(sim(a, c));
      const bool positive = rows[static_cast<std::size_t>(c)].label == rows[static_cast<std::size_t>(a)].label;
      coef(a, c) = (w / all - (positive ? w / pos : 0.0)) / anchors;
    }
  }
  // sim = u u^T / tau
  const Tensor2 grad_u = ((coef + coef.transpose()) * u) / tau;
  // u = e / r, r = sqrt(|e|^2 + eps)
  Tensor2 grad_e(n, width);
  for (Index a = 0; a < n; ++a) {
    const double r = radius(a);
    grad_e.row(a) = grad_u.row(a) / r - e.row(a) * (e.row(a).dot(grad_u.row(a)) / (r * r * r));
  }

  Tensor2 grad_es = Tensor2::Zero(sp.out.e.rows(), width);
  Tensor2 grad_et = Tensor2::Zero(tp.out.e.rows(), width);
  for (Index a = 0; a < n; ++a) {
    const Row& row = rows[static_cast<std::size_t>(a)];
    (row.from_source ? grad_es : grad_et).row(row.row) += grad_e.row(a);
  }
  backprop_from_e(net, i, sp, grad_es, result.grads);
  backprop_from_e(net, i, tp, grad_et, result.grads);
  add_zero_grad(result.grads, b.classifier.weights);
  add_zero_grad(result.grads, b.classifier.bias);
  return result;
}

}  // namespace mshift
