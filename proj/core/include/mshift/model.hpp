#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mshift/distance.hpp"
#include "mshift/netcore.hpp"

namespace mshift {

struct ModelConfig {
  int input_dim = 8;
  std::vector<int> encoder_widths{64, 64};
  int disentangler_width = 64;
  int adaptor_width = 32;
  int num_classes = 4;
  int num_sources = 3;
  double dropout_rate = 0.5;
  Activation activation = Activation::relu;
  std::uint64_t seed = 1;
};

void validate(const ModelConfig& config);

/// disentangler -> adaptor -> classifier for one source.
struct BranchNet {
  DenseLayer disentangler;
  DenseLayer adaptor;
  DenseLayer classifier;  // activation none, width K
};

enum class ParamGroup { encoder, disentangler, adaptor, classifier };

/// Group of a parameter id produced by DaNet ("encoder.0.W",
/// "branch2.adaptor.b", ...).
ParamGroup param_group(const std::string& id);

/// Branch index of a branch parameter id, -1 for encoder parameters.
int param_branch(const std::string& id);

/// Shared encoder followed by one branch per source.
class DaNet {
 public:
  DaNet() = default;
  explicit DaNet(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  int num_sources() const { return static_cast<int>(branches.size()); }
  int num_classes() const { return config_.num_classes; }
  Index encoder_width() const;

  /// Every trainable tensor in a fixed order: encoder layers, then each
  /// branch's disentangler, adaptor, classifier (weights before bias).
  std::vector<ParamTensor*> params();
  std::vector<const ParamTensor*> params() const;

  ParamTensor& param(const std::string& id);
  const ParamTensor& param(const std::string& id) const;

  std::vector<DenseLayer> encoder;
  std::vector<BranchNet> branches;

 private:
  ModelConfig config_;
};

/// Dropout is applied to the encoder output only in train mode; the mask is
/// drawn from `seed`.
struct EncodeMode {
  bool train = false;
  std::uint64_t seed = 0;

  static EncodeMode eval() { return {}; }
  static EncodeMode training(std::uint64_t seed) { return {true, seed}; }
};

struct EncoderTrace {
  std::vector<DenseCache> layers;
  Tensor2 dropout_scale;  // 0 or 1/(1-rate) per entry; empty when no dropout
};

/// h = E(x); inverted dropout on h in train mode.
Tensor2 encode(const DaNet& net, const Tensor2& x, EncodeMode mode, EncoderTrace* trace = nullptr);

/// dL/dx; encoder parameter gradients go to `grads`.
Tensor2 encode_backward(const DaNet& net, const EncoderTrace& trace, const Tensor2& grad_h,
                        GradMap* grads);

struct BranchOutput {
  Tensor2 z;
  Tensor2 e;
  Tensor2 p;
};

struct BranchTrace {
  DenseCache disentangler;
  DenseCache adaptor;
  DenseCache classifier;
};

/// z = D_i(h), e = A_i(z), p = softmax(C_i(e)).
BranchOutput branch_forward(const DaNet& net, int i, const Tensor2& h,
                            BranchTrace* trace = nullptr);

/// softmax(C_m(A_m(z_i))): source i's disentangled representation read by
/// branch m. m must differ from i.
Tensor2 cross_branch_forward(const DaNet& net, int i, int m, const Tensor2& z_i);

/// Slowly tracking copy of a DaNet used for pseudo-labels.
struct MomentumNet {
  DaNet net;
  double gamma = 1e-4;
};

MomentumNet make_momentum(const DaNet& live, double gamma);

/// momentum <- gamma * live + (1 - gamma) * momentum, entrywise.
void momentum_update(MomentumNet& mom, const DaNet& live);

struct EnsembleOutput {
  Tensor2 probabilities;  // N x K
  Tensor2 weights;        // N x M
};

/// Encodes x in eval mode, runs every branch and combines the branch
/// predictions with softmax weights over negative Mahalanobis distances of
/// h to each source's statistics.
EnsembleOutput ensemble_forward(const DaNet& net, std::span<const GaussianStats> stats,
                                const Tensor2& x);

struct PseudoLabels {
  std::vector<int> labels;
  std::vector<double> confidences;
};

PseudoLabels momentum_predict_target(const MomentumNet& mom, const Tensor2& x_t,
                                     std::span<const GaussianStats> stats);

}  // namespace mshift
