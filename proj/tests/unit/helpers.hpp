#pragma once

#include <random>
#include <vector>

#include "mshift/dataset.hpp"
#include "mshift/model.hpp"
#include "mshift/netcore.hpp"

namespace mshift::test {

inline Tensor2 random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor2 m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

inline SyntheticSpec small_spec(std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.num_sources = 3;
  spec.num_classes = 3;
  spec.dim = 4;
  spec.samples_per_class = 6;
  spec.seed = seed;
  return spec;
}

inline ModelConfig small_model(const SyntheticSpec& spec, std::uint64_t seed = 5) {
  ModelConfig mc;
  mc.input_dim = spec.dim;
  mc.encoder_widths = {6};
  mc.disentangler_width = 5;
  mc.adaptor_width = 4;
  mc.num_classes = spec.num_classes;
  mc.num_sources = spec.num_sources;
  mc.dropout_rate = 0.2;
  mc.seed = seed;
  return mc;
}

// Non-zero biases keep relu pre-activations away from the kink.
inline void jitter_biases(DaNet& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.1);
  for (ParamTensor* p : net.params()) {
    if (p->value.rows() == 1) {
      for (Index k = 0; k < p->value.size(); ++k) p->value.data()[k] = dist(rng);
    }
  }
}

inline std::vector<Batch> source_batches(const DatasetBundle& data) {
  std::vector<Batch> out;
  for (const auto& s : data.sources) out.push_back(make_batch(s));
  return out;
}

}  // namespace mshift::test
