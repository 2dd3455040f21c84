#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mshift/netcore.hpp"

namespace mshift {

struct Sample {
  std::vector<double> features;
  std::optional<int> label;
  int domain = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

using SampleSet = std::vector<Sample>;

/// M labelled sources (domain ids 0..M-1) and one target domain (id M)
/// split into an unlabelled training set and a labelled test set.
struct DatasetBundle {
  std::vector<SampleSet> sources;
  SampleSet target_train;
  SampleSet target_test;
  int num_classes = 0;
  int dim = 0;
  std::vector<std::string> domain_names;  // M + 1 entries, target last

  int num_sources() const { return static_cast<int>(sources.size()); }
  int target_domain() const { return num_sources(); }

  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

/// Throws ValidationError/SchemaError when the bundle breaks an invariant:
/// M >= 2, consistent dims, finite features, every class present in every
/// source, labels on sources and target_test, none on target_train.
void validate_bundle(const DatasetBundle& bundle);

/// Affine transform applied to one domain's copy of the class-conditional
/// samples: x -> scale * R x + translation, where R rotates coordinate plane
/// (2p, 2p+1) by rotations[p].
struct DomainShift {
  std::vector<double> rotations;
  double scale = 1.0;
  std::vector<double> translation;  // empty means zero
};

struct SyntheticSpec {
  int num_sources = 3;
  int num_classes = 4;
  int dim = 8;
  int samples_per_class = 200;
  std::vector<DomainShift> domain_shift;  // M + 1 entries (target last); empty = identity
  double class_separation = 3.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 1;
  /// Optional per-domain class priors (M + 1 rows of K weights). Empty means
  /// uniform. Counts per class become round(prior_k * K * samples_per_class).
  std::vector<std::vector<double>> class_priors;
};

void validate_spec(const SyntheticSpec& spec);

DatasetBundle generate_synthetic(const SyntheticSpec& spec);

/// Canonical JSON-lines vector file. Features are written with 17
/// significant digits so that load_vectors(save_vectors(b)) == b bit for bit.
void save_vectors(const DatasetBundle& bundle, const std::filesystem::path& path);
DatasetBundle load_vectors(const std::filesystem::path& path);

/// Index batches over `set_size` samples, shuffled with seed ^ epoch. Full
/// batches first, then one partial batch when set_size is not a multiple.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t set_size, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch);

/// A batch ready for the network. labels[j] < 0 marks a sample without a
/// usable label; an empty labels vector means the whole batch is unlabelled.
struct Batch {
  Tensor2 x;
  std::vector<int> labels;
  int domain = 0;

  Index size() const { return x.rows(); }
  bool labelled() const { return !labels.empty(); }
};

Batch make_batch(const SampleSet& set, std::span<const std::size_t> indices);
Batch make_batch(const SampleSet& set);

Tensor2 features_matrix(const SampleSet& set);

/// Deterministically splits `fraction` of every class of every source into
/// a held-out set. Returns the training bundle; held-out sets go to `holdout`.
DatasetBundle split_source_holdout(const DatasetBundle& bundle, double fraction,
                                   std::uint64_t seed, std::vector<SampleSet>& holdout);

}  // namespace mshift
