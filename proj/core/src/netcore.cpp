#include "mshift/netcore.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "mshift/error.hpp"
#include "mshift/random.hpp"

namespace mshift {

void accumulate(GradMap& grads, const std::string& id, const Tensor2& g) {
  auto it = grads.find(id);
  if (it == grads.end()) {
    grads.emplace(id, g);
    return;
  }
  if (it->second.rows() != g.rows() || it->second.cols() != g.cols()) {
    throw DimensionError(fmt::format("gradient for '{}' has shape {} but {} was accumulated", id,
                                     shape_string(it->second), shape_string(g)));
  }
  it->second += g;
}

void accumulate(GradMap& dst, const GradMap& src, double scale) {
  for (const auto& [id, g] : src) accumulate(dst, id, scale == 1.0 ? g : Tensor2(scale * g));
}

std::string shape_string(const Tensor2& t) { return fmt::format("({}x{})", t.rows(), t.cols()); }

bool all_finite(const Tensor2& t) { return t.allFinite(); }

ParamTensor::ParamTensor(std::string name, Index rows, Index cols)
    : id(std::move(name)), value(Tensor2::Zero(rows, cols)), grad(Tensor2::Zero(rows, cols)) {}

Activation parse_activation(const std::string& name) {
  if (name == "none") return Activation::none;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError(fmt::format("unknown activation '{}' (expected none|relu|tanh)", name));
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "none";
}

DenseLayer::DenseLayer(const std::string& name, Index in, Index out, Activation act)
    : weights(name + ".W", in, out), bias(name + ".b", 1, out), activation(act) {}

void DenseLayer::initialize(std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in_width() + out_width()));
  for (Index k = 0; k < weights.value.size(); ++k) {
    weights.value.data()[k] = uniform(rng, -limit, limit);
  }
  bias.value.setZero();
  weights.zero_grad();
  bias.zero_grad();
}

Tensor2 DenseLayer::forward(const Tensor2& x, DenseCache* cache) const {
  if (x.cols() != in_width()) {
    throw DimensionError(fmt::format("dense layer '{}' expects input width {} but got {} (weights {})",
                                     weights.id, in_width(), shape_string(x),
                                     shape_string(weights.value)));
  }
  Tensor2 pre = x * weights.value;
  pre.rowwise() += bias.value.row(0);
  Tensor2 out;
  switch (activation) {
    case Activation::none: out = pre; break;
    case Activation::relu: out = pre.cwiseMax(0.0); break;
    case Activation::tanh: out = pre.array().tanh().matrix(); break;
  }
  if (cache != nullptr) {
    cache->input = x;
    cache->pre = std::move(pre);
  }
  return out;
}

Tensor2 DenseLayer::backward(const DenseCache& cache, const Tensor2& grad_out,
                             GradMap* grads) const {
  Tensor2 grad_pre;
  switch (activation) {
    case Activation::none: grad_pre = grad_out; break;
    case Activation::relu:
      grad_pre = (cache.pre.array() > 0.0).select(grad_out, 0.0);
      break;
    case Activation::tanh: {
      const auto t = cache.pre.array().tanh();
      grad_pre = (grad_out.array() * (1.0 - t * t)).matrix();
      break;
    }
  }
  if (grads != nullptr) {
    accumulate(*grads, weights.id, cache.input.transpose() * grad_pre);
    accumulate(*grads, bias.id, grad_pre.colwise().sum());
  }
  return grad_pre * weights.value.transpose();
}

Tensor2 softmax_rows(const Tensor2& x) {
  Tensor2 out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double shift = x.row(r).maxCoeff();
    double total = 0.0;
    for (Index c = 0; c < x.cols(); ++c) {
      const double v = std::exp(x(r, c) - shift);
      out(r, c) = v;
      total += v;
    }
    out.row(r) /= total;
  }
  return out;
}

Tensor2 softmax_rows_backward(const Tensor2& p, const Tensor2& grad_p) {
  Tensor2 out(p.rows(), p.cols());
  for (Index r = 0; r < p.rows(); ++r) {
    const double dot = p.row(r).dot(grad_p.row(r));
    out.row(r) = p.row(r).array() * (grad_p.row(r).array() - dot);
  }
  return out;
}

GradCheckReport grad_check(const std::function<double()>& loss_fn,
                           std::span<ParamTensor* const> params, double h, double tol) {
  if (!(h > 0.0)) throw ConfigError("grad_check step h must be positive");
  GradCheckReport report;
  for (ParamTensor* param : params) {
    if (param->grad.rows() != param->value.rows() || param->grad.cols() != param->value.cols()) {
      throw IntegrityError(fmt::format("parameter '{}' grad shape {} differs from value shape {}",
                                       param->id, shape_string(param->grad),
                                       shape_string(param->value)));
    }
    for (Index k = 0; k < param->value.size(); ++k) {
      double& entry = param->value.data()[k];
      const double saved = entry;
      entry = saved + h;
      const double up = loss_fn();
      entry = saved - h;
      const double down = loss_fn();
      entry = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError(fmt::format(
            "non-finite loss while probing parameter '{}' at index {}", param->id, k));
      }
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = param->grad.data()[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.entries_checked;
      if (report.worst_index < 0 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = param->id;
        report.worst_index = k;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace mshift
