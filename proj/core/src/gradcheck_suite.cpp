#include "mshift/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>

#include <fmt/format.h>

#include "mshift/dataset.hpp"
#include "mshift/distance.hpp"
#include "mshift/error.hpp"
#include "mshift/losses.hpp"
#include "mshift/model.hpp"
#include "mshift/random.hpp"

namespace mshift {

namespace {

struct Toy {
  DaNet net;
  std::vector<Batch> sources;
  Batch target;
  Tensor2 alpha;
};

Toy make_toy(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_sources = 3;
  spec.num_classes = 3;
  spec.dim = 6;
  spec.samples_per_class = 4;
  spec.class_separation = 2.0;
  spec.noise_sigma = 0.8;
  spec.seed = seed;
  spec.domain_shift = {{{0.0}, 1.0, {}}, {{0.4}, 1.1, {}}, {{0.8}, 0.9, {}}, {{1.2}, 1.0, {}}};
  const DatasetBundle data = generate_synthetic(spec);

  ModelConfig mc;
  mc.input_dim = spec.dim;
  mc.encoder_widths = {8, 8};
  mc.disentangler_width = 8;
  mc.adaptor_width = 8;
  mc.num_classes = spec.num_classes;
  mc.num_sources = spec.num_sources;
  mc.dropout_rate = 0.25;
  mc.seed = seed;

  Toy toy{DaNet(mc), {}, {}, {}};
  // Zero biases put fully dropped rows exactly on the relu kink.
  std::mt19937_64 rng(mix_seed(seed, 0xb1a5ULL));
  for (ParamTensor* p : toy.net.params()) {
    if (p->value.rows() != 1) continue;
    for (Index k = 0; k < p->value.size(); ++k) p->value.data()[k] = 0.1 * standard_normal(rng);
  }
  for (const auto& src : data.sources) toy.sources.push_back(make_batch(src));
  // Target labels stand in for momentum pseudo-labels.
  toy.target = make_batch(data.target_test);
  toy.alpha = source_pair_alpha(toy.net, data.sources, 256, seed).alpha;
  return toy;
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options) {
  Toy toy = make_toy(options.seed);
  const EncodeMode mode = EncodeMode::training(options.seed * 31 + 7);
  AlignOptions align;
  align.tau = 0.5;

  struct Case {
    std::string name;
    std::function<LossResult()> loss;
    std::vector<ParamGroup> groups;
  };
  const std::vector<Case> cases{
      {"CE", [&] { return loss_ce(toy.net, toy.sources, mode); },
       {ParamGroup::encoder, ParamGroup::disentangler, ParamGroup::adaptor, ParamGroup::classifier}},
      {"FCD", [&] { return loss_fcd_total(toy.net, toy.sources, toy.alpha, mode); },
       {ParamGroup::disentangler}},
      {"CPA", [&] { return loss_cpa(toy.net, toy.sources, toy.target, align, mode); },
       {ParamGroup::encoder, ParamGroup::adaptor, ParamGroup::classifier}},
      {"language-MMD", [&] { return loss_cpa_language(toy.net, toy.sources, toy.target, KernelConfig::median(), mode); },
       {ParamGroup::encoder, ParamGroup::adaptor}},
      {"SCL",
       [&] {
         LossResult total;
         for (int i = 0; i < toy.net.num_sources(); ++i) {
           const LossResult part = loss_scl(toy.net, i, toy.sources[static_cast<std::size_t>(i)], toy.target, align.tau, mode);
           total.value += part.value;
           accumulate(total.grads, part.grads);
         }
         return total;
       },
       {ParamGroup::encoder, ParamGroup::adaptor, ParamGroup::classifier}},
  };

  std::vector<GradcheckEntry> entries;
  for (const Case& c : cases) {
    const auto start = std::chrono::steady_clock::now();
    const LossResult analytic = c.loss();
    if (analytic.skipped) throw NumericalError(fmt::format("{} skipped every term on the toy batch", c.name));
    std::vector<ParamTensor*> params;
    for (ParamTensor* p : toy.net.params()) {
      const bool expected = std::find(c.groups.begin(), c.groups.end(), param_group(p->id)) != c.groups.end();
      const auto it = analytic.grads.find(p->id);
      if (expected != (it != analytic.grads.end())) {
        throw IntegrityError(fmt::format("{} gradient map {} '{}'", c.name,
                                         expected ? "is missing" : "unexpectedly contains", p->id));
      }
      if (!expected) continue;
      p->grad = it->second;
      if (options.corrupt_loss && *options.corrupt_loss == c.name) p->grad.data()[0] += 1e-2;
      params.push_back(p);
    }
    GradcheckEntry entry;
    entry.loss = c.name;
    entry.report = grad_check([&] { return c.loss().value; }, params, options.h, options.tol);
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (ParamTensor* p : params) p->zero_grad();
    entries.push_back(std::move(entry));
  }
  return entries;
}

}  // namespace mshift
