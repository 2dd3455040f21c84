#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mshift/distance.hpp"
#include "mshift/error.hpp"
#include "mshift/losses.hpp"

namespace mshift {
namespace {

using test::jitter_biases;
using test::random_matrix;
using test::small_model;
using test::small_spec;
using test::source_batches;

struct Fixture {
  DatasetBundle data;
  DaNet net;
  std::vector<Batch> sources;
  Batch target;
};

Fixture make_fixture(std::uint64_t seed) {
  SyntheticSpec spec = small_spec(seed);
  Fixture f{generate_synthetic(spec), DaNet(small_model(spec, seed + 11)), {}, {}};
  jitter_biases(f.net, seed + 23);
  f.sources = source_batches(f.data);
  f.target = make_batch(f.data.target_test);
  return f;
}

Tensor2 adaptor_out(const DaNet& net, int i, const Batch& b) {
  return branch_forward(net, i, encode(net, b.x, EncodeMode::eval())).e;
}

Tensor2 probs_of(const DaNet& net, int i, const Batch& b) {
  return branch_forward(net, i, encode(net, b.x, EncodeMode::eval())).p;
}

Tensor2 rows_with_label(const Tensor2& e, const std::vector<int>& labels, int k) {
  std::vector<Index> rows;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] == k) rows.push_back(static_cast<Index>(r));
  }
  Tensor2 out(static_cast<Index>(rows.size()), e.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = e.row(rows[r]);
  return out;
}

void zero_branch(DaNet& net, int i, const char* layer) {
  net.param(fmt::format("branch{}.{}.W", i, layer)).value.setZero();
  net.param(fmt::format("branch{}.{}.b", i, layer)).value.setZero();
}

std::set<std::string> keys(const GradMap& g) {
  std::set<std::string> out;
  for (const auto& [k, v] : g) out.insert(k);
  return out;
}

Batch permuted(const Batch& b, std::uint64_t seed) {
  std::vector<std::size_t> order(static_cast<std::size_t>(b.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Batch out;
  out.domain = b.domain;
  out.x.resize(b.x.rows(), b.x.cols());
  for (std::size_t r = 0; r < order.size(); ++r) {
    out.x.row(static_cast<Index>(r)) = b.x.row(static_cast<Index>(order[r]));
    if (b.labelled()) out.labels.push_back(b.labels[order[r]]);
  }
  return out;
}

// --- cross-entropy -------------------------------------------------------

TEST(CrossEntropy, ConfidentCorrectPredictionsGiveNearZero) {
  Fixture f = make_fixture(1);
  for (int i = 0; i < 3; ++i) zero_branch(f.net, i, "classifier");
  // Every sample of source 0 labelled 0, and branch 0 pushed hard towards 0.
  std::vector<Batch> batches(3);
  for (auto& b : batches) b.domain = 0;
  batches[0] = f.sources[0];
  std::fill(batches[0].labels.begin(), batches[0].labels.end(), 0);
  batches[1].x.resize(0, 4);
  batches[2].x.resize(0, 4);
  f.net.param("branch0.classifier.b").value(0, 0) = 40.0;
  EXPECT_LT(loss_ce(f.net, batches).value, 1e-12);
}

TEST(CrossEntropy, UniformPredictionsOverFiveClassesGiveLogFive) {
  SyntheticSpec spec = small_spec(2);
  spec.num_classes = 5;
  spec.samples_per_class = 4;
  const DatasetBundle data = generate_synthetic(spec);
  DaNet net(small_model(spec));
  for (int i = 0; i < 3; ++i) zero_branch(net, i, "classifier");
  const auto batches = source_batches(data);
  EXPECT_NEAR(loss_ce(net, batches).value, std::log(5.0), 1e-12);
}

TEST(CrossEntropy, MatchesPerSampleLoopOracle) {
  Fixture f = make_fixture(3);
  double total = 0.0;
  double count = 0.0;
  for (int i = 0; i < 3; ++i) {
    const Tensor2 p = probs_of(f.net, i, f.sources[static_cast<std::size_t>(i)]);
    for (Index r = 0; r < p.rows(); ++r) {
      total -= std::log(p(r, f.sources[static_cast<std::size_t>(i)].labels[static_cast<std::size_t>(r)]));
      count += 1.0;
    }
  }
  EXPECT_NEAR(loss_ce(f.net, f.sources).value, total / count, 1e-12);
}

TEST(CrossEntropy, TrainsEveryGroup) {
  Fixture f = make_fixture(4);
  const LossResult r = loss_ce(f.net, f.sources);
  std::set<std::string> all;
  for (const ParamTensor* p : f.net.params()) all.insert(p->id);
  EXPECT_EQ(keys(r.grads), all);
}

TEST(CrossEntropy, RejectsUnlabelledOrEmptyInput) {
  Fixture f = make_fixture(5);
  std::vector<Batch> batches = f.sources;
  batches[1].labels.clear();
  EXPECT_THROW(loss_ce(f.net, batches), ContractError);
  batches = f.sources;
  batches[2].labels[0] = -1;
  EXPECT_THROW(loss_ce(f.net, batches), ContractError);
  std::vector<Batch> empty(3);
  for (auto& b : empty) b.x.resize(0, 4);
  EXPECT_THROW(loss_ce(f.net, empty), ContractError);
  EXPECT_THROW(loss_ce(f.net, std::span<const Batch>(f.sources.data(), 2)), ContractError);
}

TEST(CrossEntropy, SmallGradientStepLowersLoss) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Fixture f = make_fixture(seed);
    const LossResult r = loss_ce(f.net, f.sources);
    for (ParamTensor* p : f.net.params()) p->value -= 1e-3 * r.grads.at(p->id);
    EXPECT_LT(loss_ce(f.net, f.sources).value, r.value) << "seed " << seed;
  }
}

// --- disentangler losses ------------------------------------------------

TEST(FcdMax, EqualsCrossEntropyOfOwnBranchWithOnlyItsDisentangler) {
  Fixture f = make_fixture(6);
  for (int i = 0; i < 3; ++i) {
    std::vector<Batch> only(3);
    for (int m = 0; m < 3; ++m) {
      only[static_cast<std::size_t>(m)] = m == i ? f.sources[static_cast<std::size_t>(m)] : Batch{};
      if (m != i) only[static_cast<std::size_t>(m)].x.resize(0, 4);
    }
    const LossResult ce = loss_ce(f.net, only);
    const LossResult mx = loss_fcd_max(f.net, i, f.sources[static_cast<std::size_t>(i)]);
    EXPECT_NEAR(mx.value, ce.value, 1e-14);
    EXPECT_EQ(keys(mx.grads), (std::set<std::string>{fmt::format("branch{}.disentangler.W", i),
                                                     fmt::format("branch{}.disentangler.b", i)}));
    for (const auto& [id, g] : mx.grads) EXPECT_TRUE(g.isApprox(ce.grads.at(id), 1e-12)) << id;
  }
}

TEST(FcdMin, UniformCrossBranchPredictionsGiveZero) {
  Fixture f = make_fixture(7);
  for (int i = 0; i < 3; ++i) zero_branch(f.net, i, "classifier");
  const std::vector<double> alpha{0.7, 1.3};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(loss_fcd_min(f.net, i, f.sources[static_cast<std::size_t>(i)], alpha).value, 0.0, 1e-15);
  }
}

TEST(FcdMin, SingleConfidentSampleTwoBranches) {
  SyntheticSpec spec = small_spec(8);
  spec.num_sources = 2;
  spec.num_classes = 2;
  const DatasetBundle data = generate_synthetic(spec);
  DaNet net(small_model(spec));
  zero_branch(net, 1, "classifier");
  net.param("branch1.classifier.b").value << 50.0, -50.0;
  Batch one = make_batch(data.sources[0], std::vector<std::size_t>{0});
  // (1/(2*1)) * ((1 - 0.5)^2 + (0 - 0.5)^2)
  EXPECT_NEAR(loss_fcd_min(net, 0, one, std::vector<double>{1.0}).value, 0.25, 1e-12);
}

TEST(FcdMin, ZeroAlphaGivesZeroValueAndZeroGradients) {
  Fixture f = make_fixture(9);
  const LossResult r = loss_fcd_min(f.net, 1, f.sources[1], std::vector<double>{0.0, 0.0});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(keys(r.grads), (std::set<std::string>{"branch1.disentangler.W", "branch1.disentangler.b"}));
  for (const auto& [id, g] : r.grads) EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0) << id;
}

TEST(FcdMin, MatchesLoopOracleAndIsNonNegative) {
  Fixture f = make_fixture(10);
  const std::vector<double> alpha{0.4, 2.0};
  const int i = 2;
  const Batch& b = f.sources[2];
  const Tensor2 h = encode(f.net, b.x, EncodeMode::eval());
  const Tensor2 z = f.net.branches[2].disentangler.forward(h);
  double oracle = 0.0;
  int k = 0;
  for (int m = 0; m < 3; ++m) {
    if (m == i) continue;
    const Tensor2 p = cross_branch_forward(f.net, i, m, z);
    for (Index r = 0; r < p.rows(); ++r) {
      for (Index c = 0; c < p.cols(); ++c) {
        oracle += alpha[static_cast<std::size_t>(k)] * std::pow(p(r, c) - 1.0 / 3.0, 2);
      }
    }
    ++k;
  }
  oracle /= 3.0 * static_cast<double>(b.size());
  const double value = loss_fcd_min(f.net, i, b, alpha).value;
  EXPECT_NEAR(value, oracle, 1e-14);
  EXPECT_GE(value, 0.0);
}

TEST(FcdMin, RejectsBadAlpha) {
  Fixture f = make_fixture(11);
  EXPECT_THROW(loss_fcd_min(f.net, 0, f.sources[0], std::vector<double>{1.0}), ContractError);
  EXPECT_THROW(loss_fcd_min(f.net, 0, f.sources[0], std::vector<double>{1.0, -0.1}), ContractError);
}

TEST(FcdTotal, IsSumOfPartsAndTouchesOnlyDisentanglers) {
  Fixture f = make_fixture(12);
  Tensor2 alpha(3, 3);
  alpha << 0.0, 0.3, 0.8, 0.3, 0.0, 0.5, 0.8, 0.5, 0.0;
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> row;
    for (int m = 0; m < 3; ++m) {
      if (m != i) row.push_back(alpha(i, m));
    }
    sum += loss_fcd_max(f.net, i, f.sources[static_cast<std::size_t>(i)]).value;
    sum += loss_fcd_min(f.net, i, f.sources[static_cast<std::size_t>(i)], row).value;
  }
  const LossResult total = loss_fcd_total(f.net, f.sources, alpha);
  EXPECT_NEAR(total.value, sum, 1e-13);
  for (const auto& [id, g] : total.grads) EXPECT_EQ(param_group(id), ParamGroup::disentangler) << id;
  EXPECT_EQ(total.grads.size(), 6u);
}

// --- class-aware alignment ----------------------------------------------

double ca_oracle(const DaNet& net, int i, const Batch& source, const Batch& target,
                 const AlignOptions& opt) {
  const Tensor2 es = adaptor_out(net, i, source);
  const Tensor2 et = adaptor_out(net, i, target);
  const int K = net.num_classes();
  auto enough = [&](const std::vector<int>& labels, int k) {
    return std::count(labels.begin(), labels.end(), k) >= opt.min_class_count;
  };
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    if (!enough(source.labels, k) || !enough(target.labels, k)) continue;
    const Tensor2 pk = rows_with_label(es, source.labels, k);
    const Tensor2 qk = rows_with_label(et, target.labels, k);
    double neg = 0.0;
    int negatives = 0;
    for (int o = 0; o < K; ++o) {
      if (o == k) continue;
      if (enough(source.labels, o)) {
        neg += std::exp(-mmd2(pk, rows_with_label(es, source.labels, o), opt.kernel) / opt.tau);
        ++negatives;
      }
      if (enough(target.labels, o)) {
        neg += std::exp(-mmd2(qk, rows_with_label(et, target.labels, o), opt.kernel) / opt.tau);
        ++negatives;
      }
    }
    if (negatives == 0) continue;
    const double pos = 2.0 * std::exp(-mmd2(pk, qk, opt.kernel) / opt.tau);
    total += -std::log(pos / (neg + opt.epsilon));
  }
  return total;
}

TEST(ClassAlign, MatchesOracleBuiltFromMmd) {
  for (std::uint64_t seed : {13u, 14u, 15u}) {
    Fixture f = make_fixture(seed);
    for (double tau : {0.1, 0.5, 0.9}) {
      AlignOptions opt;
      opt.tau = tau;
      for (int i = 0; i < 3; ++i) {
        const LossResult r = loss_ca(f.net, i, f.sources[static_cast<std::size_t>(i)], f.target, opt);
        EXPECT_FALSE(r.skipped);
        EXPECT_NEAR(r.value, ca_oracle(f.net, i, f.sources[static_cast<std::size_t>(i)], f.target, opt), 1e-10)
            << "seed " << seed << " tau " << tau << " branch " << i;
      }
    }
  }
}

TEST(ClassAlign, FixedKernelAlsoMatchesOracle) {
  Fixture f = make_fixture(16);
  AlignOptions opt;
  opt.kernel = KernelConfig::fixed(0.7);
  EXPECT_NEAR(loss_ca(f.net, 0, f.sources[0], f.target, opt).value,
              ca_oracle(f.net, 0, f.sources[0], f.target, opt), 1e-10);
}

TEST(ClassAlign, CollapsedFeaturesGiveNearZero) {
  SyntheticSpec spec = small_spec(17);
  spec.num_classes = 2;
  const DatasetBundle data = generate_synthetic(spec);
  DaNet net(small_model(spec));
  zero_branch(net, 0, "adaptor");
  const Batch s = make_batch(data.sources[0]);
  const Batch t = make_batch(data.target_test);
  // d = 0 everywhere: each class gives -log(2 / (1 + 1 + eps)).
  const double expected = 2.0 * -std::log(2.0 / (2.0 + 1e-8));
  EXPECT_NEAR(loss_ca(net, 0, s, t, AlignOptions{}).value, expected, 1e-15);
  EXPECT_LT(loss_ca(net, 0, s, t, AlignOptions{}).value, 1e-7);
}

TEST(ClassAlign, NoNegativesIsSkipped) {
  Fixture f = make_fixture(18);
  Batch s = f.sources[0];
  Batch t = f.target;
  std::fill(s.labels.begin(), s.labels.end(), 1);
  std::fill(t.labels.begin(), t.labels.end(), 1);
  const LossResult r = loss_ca(f.net, 0, s, t, AlignOptions{});
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.value, 0.0);
}

TEST(ClassAlign, ClassesBelowMinimumCountAreDropped) {
  Fixture f = make_fixture(19);
  Batch t = f.target;
  int kept = 0;
  for (auto& y : t.labels) {
    if (y == 2 && kept++ >= 1) y = -1;
  }
  AlignOptions opt;
  const double value = loss_ca(f.net, 1, f.sources[1], t, opt).value;
  EXPECT_NEAR(value, ca_oracle(f.net, 1, f.sources[1], t, opt), 1e-10);
  // Same as if class 2 were absent from the target entirely.
  Batch t2 = t;
  for (auto& y : t2.labels) {
    if (y == 2) y = -1;
  }
  EXPECT_NEAR(value, loss_ca(f.net, 1, f.sources[1], t2, opt).value, 1e-14);
}

TEST(ClassAlign, UnlabelledTargetRowsAreIgnored) {
  Fixture f = make_fixture(20);
  Batch t = f.target;
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < t.labels.size(); ++r) {
    if (r % 3 == 0) t.labels[r] = -1;
    else keep.push_back(r);
  }
  const Batch trimmed = make_batch(f.data.target_test, keep);
  EXPECT_NEAR(loss_ca(f.net, 0, f.sources[0], t, AlignOptions{}).value,
              loss_ca(f.net, 0, f.sources[0], trimmed, AlignOptions{}).value, 1e-12);
}

TEST(ClassAlign, GradientsSkipDisentanglersAndOtherBranches) {
  Fixture f = make_fixture(21);
  const LossResult r = loss_ca(f.net, 1, f.sources[1], f.target, AlignOptions{});
  for (const auto& [id, g] : r.grads) {
    const ParamGroup group = param_group(id);
    EXPECT_NE(group, ParamGroup::disentangler) << id;
    if (group != ParamGroup::encoder) EXPECT_EQ(param_branch(id), 1) << id;
  }
  EXPECT_TRUE(r.grads.count("encoder.0.W"));
  EXPECT_TRUE(r.grads.count("branch1.adaptor.W"));
}

TEST(ClassAlign, RejectsBadInput) {
  Fixture f = make_fixture(22);
  AlignOptions opt;
  opt.tau = 0.0;
  EXPECT_THROW(loss_ca(f.net, 0, f.sources[0], f.target, opt), ConfigError);
  opt.tau = -1.0;
  EXPECT_THROW(loss_ca(f.net, 0, f.sources[0], f.target, opt), ConfigError);
  Batch unl = f.target;
  unl.labels.clear();
  EXPECT_THROW(loss_ca(f.net, 0, f.sources[0], unl, AlignOptions{}), ContractError);
  EXPECT_THROW(loss_ca(f.net, 5, f.sources[0], f.target, AlignOptions{}), ContractError);
}

TEST(ClassAlign, TargetEqualToSourceLeavesOnlyNegatives) {
  Fixture f = make_fixture(23);
  Batch t = f.sources[0];
  t.domain = f.target.domain;
  AlignOptions opt;
  opt.epsilon = 0.0;
  const Tensor2 e = adaptor_out(f.net, 0, f.sources[0]);
  // d(P^k, Q^k) = 0 and both sides share negatives: log sum_o exp(-d_ko/tau).
  double expected = 0.0;
  for (int k = 0; k < 3; ++k) {
    double neg = 0.0;
    for (int o = 0; o < 3; ++o) {
      if (o == k) continue;
      neg += std::exp(-mmd2(rows_with_label(e, t.labels, k), rows_with_label(e, t.labels, o), opt.kernel) / opt.tau);
    }
    expected += std::log(neg);
  }
  EXPECT_NEAR(loss_ca(f.net, 0, f.sources[0], t, opt).value, expected, 1e-10);
}

TEST(Cpa, SumsBranchesAndSkipsOnlyWhenAllSkip) {
  Fixture f = make_fixture(24);
  AlignOptions opt;
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) sum += loss_ca(f.net, i, f.sources[static_cast<std::size_t>(i)], f.target, opt).value;
  const LossResult r = loss_cpa(f.net, f.sources, f.target, opt);
  EXPECT_NEAR(r.value, sum, 1e-12);
  EXPECT_FALSE(r.skipped);

  Batch t = f.target;
  std::fill(t.labels.begin(), t.labels.end(), -1);
  const LossResult none = loss_cpa(f.net, f.sources, t, opt);
  EXPECT_TRUE(none.skipped);
  EXPECT_EQ(none.value, 0.0);
}

TEST(Cpa, InvariantToRowOrder) {
  Fixture f = make_fixture(25);
  std::vector<Batch> shuffled;
  for (std::size_t i = 0; i < f.sources.size(); ++i) shuffled.push_back(permuted(f.sources[i], 100 + i));
  const double a = loss_cpa(f.net, f.sources, f.target, AlignOptions{}).value;
  const double b = loss_cpa(f.net, shuffled, permuted(f.target, 7), AlignOptions{}).value;
  EXPECT_NEAR(a, b, 1e-10);
}

// --- language-level alignment -------------------------------------------

TEST(LanguageMmd, MatchesSumOfBranchMmd) {
  Fixture f = make_fixture(26);
  double oracle = 0.0;
  for (int i = 0; i < 3; ++i) {
    oracle += mmd2(adaptor_out(f.net, i, f.sources[static_cast<std::size_t>(i)]),
                   adaptor_out(f.net, i, f.target), KernelConfig::median());
  }
  const LossResult r = loss_cpa_language(f.net, f.sources, f.target);
  EXPECT_NEAR(r.value, oracle, 1e-12);
  EXPECT_FALSE(r.skipped);
  for (const auto& [id, g] : r.grads) {
    const ParamGroup group = param_group(id);
    EXPECT_TRUE(group == ParamGroup::encoder || group == ParamGroup::adaptor) << id;
  }
}

TEST(LanguageMmd, IdenticalSetsGiveZero) {
  Fixture f = make_fixture(27);
  std::vector<Batch> same(3, f.target);
  EXPECT_NEAR(loss_cpa_language(f.net, same, f.target).value, 0.0, 1e-12);
}

TEST(LanguageMmd, IgnoresLabels) {
  Fixture f = make_fixture(28);
  Batch t = f.target;
  t.labels.clear();
  EXPECT_EQ(loss_cpa_language(f.net, f.sources, t).value,
            loss_cpa_language(f.net, f.sources, f.target).value);
}

// --- sample-level contrastive -------------------------------------------

double scl_oracle(const DaNet& net, int i, const Batch& s, const Batch& t, double tau) {
  std::vector<std::vector<double>> u;
  std::vector<int> y;
  auto add = [&](const Batch& b) {
    const Tensor2 e = adaptor_out(net, i, b);
    for (Index r = 0; r < e.rows(); ++r) {
      const int label = b.labels[static_cast<std::size_t>(r)];
      if (label < 0) continue;
      double norm2 = 0.0;
      for (Index c = 0; c < e.cols(); ++c) norm2 += e(r, c) * e(r, c);
      const double radius = std::sqrt(norm2 + 1e-12);
      std::vector<double> row;
      for (Index c = 0; c < e.cols(); ++c) row.push_back(e(r, c) / radius);
      u.push_back(row);
      y.push_back(label);
    }
  };
  add(s);
  add(t);
  auto sim = [&](std::size_t a, std::size_t b) {
    double dot = 0.0;
    for (std::size_t c = 0; c < u[a].size(); ++c) dot += u[a][c] * u[b][c];
    return dot / tau;
  };
  double total = 0.0;
  int anchors = 0;
  for (std::size_t a = 0; a < u.size(); ++a) {
    double pos = 0.0;
    double all = 0.0;
    bool has_pos = false;
    for (std::size_t b = 0; b < u.size(); ++b) {
      if (b == a) continue;
      all += std::exp(sim(a, b));
      if (y[b] == y[a]) {
        pos += std::exp(sim(a, b));
        has_pos = true;
      }
    }
    if (!has_pos) continue;
    total += -std::log(pos / all);
    ++anchors;
  }
  return total / anchors;
}

TEST(Scl, MatchesLoopOracle) {
  for (std::uint64_t seed : {29u, 30u}) {
    Fixture f = make_fixture(seed);
    for (double tau : {0.1, 0.5}) {
      for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(loss_scl(f.net, i, f.sources[static_cast<std::size_t>(i)], f.target, tau).value,
                    scl_oracle(f.net, i, f.sources[static_cast<std::size_t>(i)], f.target, tau), 1e-10);
      }
    }
  }
}

TEST(Scl, IdenticalFeaturesGiveLogOfPositiveShare) {
  SyntheticSpec spec = small_spec(31);
  spec.num_classes = 2;
  spec.samples_per_class = 4;
  const DatasetBundle data = generate_synthetic(spec);
  DaNet net(small_model(spec));
  // Constant adaptor output: every similarity is equal.
  net.param("branch0.adaptor.W").value.setZero();
  net.param("branch0.adaptor.b").value.setConstant(0.5);
  const Batch s = make_batch(data.sources[0]);
  const Batch t = make_batch(data.target_test);
  // 8 source + 8 target rows, 8 per class: 7 positives out of 15 others.
  EXPECT_NEAR(loss_scl(net, 0, s, t, 0.3).value, -std::log(7.0 / 15.0), 1e-12);
}

TEST(Scl, NoPositivesIsSkipped) {
  SyntheticSpec spec = small_spec(32);
  spec.num_classes = 2;
  const DatasetBundle data = generate_synthetic(spec);
  DaNet net(small_model(spec));
  std::vector<std::size_t> one_each;
  for (int k = 0; k < 2; ++k) {
    for (std::size_t r = 0; r < data.sources[0].size(); ++r) {
      if (*data.sources[0][r].label == k) {
        one_each.push_back(r);
        break;
      }
    }
  }
  const Batch s = make_batch(data.sources[0], one_each);
  Batch t = make_batch(data.target_test);
  std::fill(t.labels.begin(), t.labels.end(), -1);
  const LossResult r = loss_scl(net, 0, s, t, 0.5);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.value, 0.0);
}

TEST(Scl, GradientsSkipDisentanglers) {
  Fixture f = make_fixture(33);
  const LossResult r = loss_scl(f.net, 2, f.sources[2], f.target, 0.5);
  for (const auto& [id, g] : r.grads) EXPECT_NE(param_group(id), ParamGroup::disentangler) << id;
  EXPECT_THROW(loss_scl(f.net, 2, f.sources[2], f.target, 0.0), ConfigError);
}

TEST(Scl, InvariantToRowOrder) {
  Fixture f = make_fixture(34);
  EXPECT_NEAR(loss_scl(f.net, 0, f.sources[0], f.target, 0.5).value,
              loss_scl(f.net, 0, permuted(f.sources[0], 3), permuted(f.target, 4), 0.5).value, 1e-12);
}

// --- dropout streams -----------------------------------------------------

TEST(StreamMode, EvalIsUntouchedAndDomainsGetDistinctStreams) {
  EXPECT_FALSE(stream_mode(EncodeMode::eval(), 2).train);
  const EncodeMode base = EncodeMode::training(9);
  EXPECT_EQ(stream_mode(base, 1).seed, stream_mode(base, 1).seed);
  EXPECT_NE(stream_mode(base, 1).seed, stream_mode(base, 2).seed);
}

TEST(StreamMode, SameBatchSeesSameMaskAcrossLosses) {
  Fixture f = make_fixture(35);
  const EncodeMode mode = EncodeMode::training(77);
  const double a = loss_cpa_language(f.net, f.sources, f.target, KernelConfig::median(), mode).value;
  const double b = loss_cpa_language(f.net, f.sources, f.target, KernelConfig::median(), mode).value;
  EXPECT_EQ(a, b);
}

}  // namespace
}  // namespace mshift
