#include "mshift/model.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "mshift/error.hpp"
#include "mshift/random.hpp"

namespace mshift {

void validate(const ModelConfig& config) {
  if (config.input_dim < 1) throw ConfigError("model input_dim must be positive");
  if (config.num_sources < 1) throw ConfigError("model needs at least one branch");
  if (config.num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (config.encoder_widths.empty()) throw ConfigError("encoder needs at least one layer");
  for (int w : config.encoder_widths) {
    if (w < 1) throw ConfigError("encoder widths must be positive");
  }
  if (config.disentangler_width < 1 || config.adaptor_width < 1) {
    throw ConfigError("branch widths must be positive");
  }
  if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0) {
    throw ConfigError("dropout_rate must lie in [0, 1)");
  }
}

ParamGroup param_group(const std::string& id) {
  if (id.starts_with("encoder.")) return ParamGroup::encoder;
  if (id.find(".disentangler.") != std::string::npos) return ParamGroup::disentangler;
  if (id.find(".adaptor.") != std::string::npos) return ParamGroup::adaptor;
  if (id.find(".classifier.") != std::string::npos) return ParamGroup::classifier;
  throw IntegrityError(fmt::format("unrecognised parameter id '{}'", id));
}

int param_branch(const std::string& id) {
  if (!id.starts_with("branch")) return -1;
  return std::stoi(id.substr(6, id.find('.') - 6));
}

DaNet::DaNet(const ModelConfig& config) : config_(config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  int width = config.input_dim;
  for (std::size_t l = 0; l < config.encoder_widths.size(); ++l) {
    encoder.emplace_back(fmt::format("encoder.{}", l), width, config.encoder_widths[l],
                         config.activation);
    encoder.back().initialize(rng);
    width = config.encoder_widths[l];
  }
  for (int i = 0; i < config.num_sources; ++i) {
    const std::string prefix = fmt::format("branch{}", i);
    BranchNet b{
        DenseLayer(prefix + ".disentangler", width, config.disentangler_width, config.activation),
        DenseLayer(prefix + ".adaptor", config.disentangler_width, config.adaptor_width,
                   config.activation),
        DenseLayer(prefix + ".classifier", config.adaptor_width, config.num_classes,
                   Activation::none)};
    b.disentangler.initialize(rng);
    b.adaptor.initialize(rng);
    b.classifier.initialize(rng);
    branches.push_back(std::move(b));
  }
}

Index DaNet::encoder_width() const { return encoder.back().out_width(); }

std::vector<ParamTensor*> DaNet::params() {
  std::vector<ParamTensor*> out;
  for (auto& layer : encoder) {
    out.push_back(&layer.weights);
    out.push_back(&layer.bias);
  }
  for (auto& b : branches) {
    for (DenseLayer* layer : {&b.disentangler, &b.adaptor, &b.classifier}) {
      out.push_back(&layer->weights);
      out.push_back(&layer->bias);
    }
  }
  return out;
}

std::vector<const ParamTensor*> DaNet::params() const {
  auto mutable_params = const_cast<DaNet*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

ParamTensor& DaNet::param(const std::string& id) {
  for (ParamTensor* p : params()) {
    if (p->id == id) return *p;
  }
  throw IntegrityError(fmt::format("no parameter named '{}'", id));
}

const ParamTensor& DaNet::param(const std::string& id) const {
  return const_cast<DaNet*>(this)->param(id);
}

Tensor2 encode(const DaNet& net, const Tensor2& x, EncodeMode mode, EncoderTrace* trace) {
  if (x.cols() != net.config().input_dim) {
    throw DimensionError(fmt::format("encoder expects input width {} but got {}",
                                     net.config().input_dim, shape_string(x)));
  }
  if (trace != nullptr) trace->layers.assign(net.encoder.size(), {});
  Tensor2 h = x;
  for (std::size_t l = 0; l < net.encoder.size(); ++l) {
    h = net.encoder[l].forward(h, trace != nullptr ? &trace->layers[l] : nullptr);
  }
  const double rate = net.config().dropout_rate;
  if (mode.train && rate > 0.0) {
    std::mt19937_64 rng(mode.seed);
    Tensor2 scale(h.rows(), h.cols());
    const double keep = 1.0 / (1.0 - rate);
    for (Index k = 0; k < scale.size(); ++k) scale.data()[k] = uniform01(rng) < rate ? 0.0 : keep;
    h = h.cwiseProduct(scale);
    if (trace != nullptr) trace->dropout_scale = std::move(scale);
  } else if (trace != nullptr) {
    trace->dropout_scale.resize(0, 0);
  }
  return h;
}

Tensor2 encode_backward(const DaNet& net, const EncoderTrace& trace, const Tensor2& grad_h,
                        GradMap* grads) {
  Tensor2 g = trace.dropout_scale.size() > 0 ? Tensor2(grad_h.cwiseProduct(trace.dropout_scale))
                                             : grad_h;
  for (std::size_t l = net.encoder.size(); l-- > 0;) {
    g = net.encoder[l].backward(trace.layers[l], g, grads);
  }
  return g;
}

namespace {

void check_branch(const DaNet& net, int i) {
  if (i < 0 || i >= net.num_sources()) {
    throw ContractError(fmt::format("branch index {} out of range [0, {})", i, net.num_sources()));
  }
}

}  // namespace

BranchOutput branch_forward(const DaNet& net, int i, const Tensor2& h, BranchTrace* trace) {
  check_branch(net, i);
  const BranchNet& b = net.branches[static_cast<std::size_t>(i)];
  BranchOutput out;
  out.z = b.disentangler.forward(h, trace != nullptr ? &trace->disentangler : nullptr);
  out.e = b.adaptor.forward(out.z, trace != nullptr ? &trace->adaptor : nullptr);
  out.p = softmax_rows(b.classifier.forward(out.e, trace != nullptr ? &trace->classifier : nullptr));
  return out;
}

Tensor2 cross_branch_forward(const DaNet& net, int i, int m, const Tensor2& z_i) {
  check_branch(net, i);
  check_branch(net, m);
  if (m == i) {
    throw ContractError(fmt::format("cross-branch routing needs m != i (both {})", i));
  }
  const BranchNet& b = net.branches[static_cast<std::size_t>(m)];
  return softmax_rows(b.classifier.forward(b.adaptor.forward(z_i)));
}

MomentumNet make_momentum(const DaNet& live, double gamma) { return MomentumNet{live, gamma}; }

void momentum_update(MomentumNet& mom, const DaNet& live) {
  auto mp = mom.net.params();
  auto lp = live.params();
  if (mp.size() != lp.size()) {
    throw IntegrityError(fmt::format("momentum model has {} tensors, live model {}", mp.size(),
                                     lp.size()));
  }
  const double g = mom.gamma;
  for (std::size_t k = 0; k < mp.size(); ++k) {
    if (mp[k]->id != lp[k]->id || mp[k]->value.rows() != lp[k]->value.rows() ||
        mp[k]->value.cols() != lp[k]->value.cols()) {
      throw IntegrityError(fmt::format("momentum tensor '{}' {} does not mirror live '{}' {}",
                                       mp[k]->id, shape_string(mp[k]->value), lp[k]->id,
                                       shape_string(lp[k]->value)));
    }
    mp[k]->value = g * lp[k]->value + (1.0 - g) * mp[k]->value;
  }
}

EnsembleOutput ensemble_forward(const DaNet& net, std::span<const GaussianStats> stats,
                                const Tensor2& x) {
  const int M = net.num_sources();
  if (static_cast<int>(stats.size()) != M) {
    throw StateError(fmt::format(
        "ensemble prediction needs Gaussian statistics for all {} sources (have {}); refresh "
        "statistics first",
        M, stats.size()));
  }
  const Tensor2 h = encode(net, x, EncodeMode::eval());
  std::vector<Tensor2> probs;
  probs.reserve(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) probs.push_back(branch_forward(net, i, h).p);

  EnsembleOutput out;
  out.probabilities = Tensor2::Zero(x.rows(), net.num_classes());
  out.weights.resize(x.rows(), M);
  std::vector<double> betas(static_cast<std::size_t>(M));
  for (Index r = 0; r < x.rows(); ++r) {
    const std::span<const double> hr(h.row(r).data(), static_cast<std::size_t>(h.cols()));
    for (int i = 0; i < M; ++i) {
      betas[static_cast<std::size_t>(i)] = mahalanobis_score(hr, stats[static_cast<std::size_t>(i)]);
    }
    const auto w = ensemble_weights(betas);
    for (int i = 0; i < M; ++i) {
      out.weights(r, i) = w[static_cast<std::size_t>(i)];
      out.probabilities.row(r) += w[static_cast<std::size_t>(i)] * probs[static_cast<std::size_t>(i)].row(r);
    }
  }
  return out;
}

PseudoLabels momentum_predict_target(const MomentumNet& mom, const Tensor2& x_t,
                                     std::span<const GaussianStats> stats) {
  const EnsembleOutput ens = ensemble_forward(mom.net, stats, x_t);
  PseudoLabels out;
  out.labels.resize(static_cast<std::size_t>(x_t.rows()));
  out.confidences.resize(static_cast<std::size_t>(x_t.rows()));
  for (Index r = 0; r < x_t.rows(); ++r) {
    Index best = 0;
    const double conf = ens.probabilities.row(r).maxCoeff(&best);
    out.labels[static_cast<std::size_t>(r)] = static_cast<int>(best);
    out.confidences[static_cast<std::size_t>(r)] = conf;
  }
  return out;
}

}  // namespace mshift
