#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mshift {

/// Dense row-major matrix of doubles. Rows are samples, columns features.
using Tensor2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Gradients keyed by parameter id. Ordered so that iteration is deterministic.
using GradMap = std::map<std::string, Tensor2>;

/// Adds `g` into `grads[id]`, creating the entry when absent.
void accumulate(GradMap& grads, const std::string& id, const Tensor2& g);

/// Adds every entry of `src` scaled by `scale` into `dst`.
void accumulate(GradMap& dst, const GradMap& src, double scale = 1.0);

std::string shape_string(const Tensor2& t);

bool all_finite(const Tensor2& t);

struct ParamTensor {
  std::string id;
  Tensor2 value;
  Tensor2 grad;

  ParamTensor() = default;
  ParamTensor(std::string name, Index rows, Index cols);

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

enum class Activation { none, relu, tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// What a dense layer remembers from forward for its backward pass.
struct DenseCache {
  Tensor2 input;
  Tensor2 pre;  // x·W + b, before the activation
};

class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(const std::string& name, Index in, Index out, Activation act);

  Index in_width() const { return weights.value.rows(); }
  Index out_width() const { return weights.value.cols(); }

  /// Uniform Glorot initialisation for weights, zero bias.
  void initialize(std::mt19937_64& rng);

  /// activation(x·W + b). When `cache` is non-null it receives what
  /// backward() needs; the layer itself is never mutated.
  Tensor2 forward(const Tensor2& x, DenseCache* cache = nullptr) const;

  /// Returns dL/dx given dL/dy. Parameter gradients are added to `grads`
  /// when it is non-null.
  Tensor2 backward(const DenseCache& cache, const Tensor2& grad_out, GradMap* grads) const;

  ParamTensor weights;
  ParamTensor bias;
  Activation activation = Activation::none;
};

/// Row-wise softmax with max shift.
Tensor2 softmax_rows(const Tensor2& x);

/// Backpropagates dL/dp through p = softmax_rows(logits).
Tensor2 softmax_rows_backward(const Tensor2& p, const Tensor2& grad_p);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = true;
};

/// Central-difference check of the analytic gradients stored in each
/// ParamTensor::grad. `loss_fn` must be deterministic and read the current
/// parameter values; entries are perturbed in place and restored.
GradCheckReport grad_check(const std::function<double()>& loss_fn,
                           std::span<ParamTensor* const> params, double h, double tol);

}  // namespace mshift
