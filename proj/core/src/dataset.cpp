#include "mshift/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "mshift/error.hpp"
#include "mshift/random.hpp"

namespace mshift {

namespace {

constexpr const char* kFormatName = "mshift-vectors";
constexpr int kFormatVersion = 1;

void check_set(const SampleSet& set, const std::string& what, int dim, int num_classes,
               bool require_label, bool forbid_label) {
  for (std::size_t j = 0; j < set.size(); ++j) {
    const Sample& s = set[j];
    if (static_cast<int>(s.features.size()) != dim) {
      throw SchemaError(fmt::format("{} sample {} has {} features, expected {}", what, j,
                                    s.features.size(), dim));
    }
    for (double v : s.features) {
      if (!std::isfinite(v)) {
        throw ValidationError(fmt::format("{} sample {} has a non-finite feature", what, j));
      }
    }
    if (require_label && !s.label) {
      throw ValidationError(fmt::format("{} sample {} is missing its label", what, j));
    }
    if (forbid_label && s.label) {
      throw ValidationError(fmt::format("{} sample {} must be unlabelled", what, j));
    }
    if (s.label && (*s.label < 0 || *s.label >= num_classes)) {
      throw ValidationError(fmt::format("{} sample {} has label {} outside [0, {})", what, j,
                                        *s.label, num_classes));
    }
  }
}

std::vector<int> class_counts(const SyntheticSpec& spec, int domain) {
  const int K = spec.num_classes;
  std::vector<int> counts(static_cast<std::size_t>(K), spec.samples_per_class);
  if (spec.class_priors.empty()) return counts;
  const auto& prior = spec.class_priors[static_cast<std::size_t>(domain)];
  const double total = std::accumulate(prior.begin(), prior.end(), 0.0);
  for (int k = 0; k < K; ++k) {
    counts[static_cast<std::size_t>(k)] = static_cast<int>(
        std::lround(prior[static_cast<std::size_t>(k)] / total * K * spec.samples_per_class));
  }
  return counts;
}

std::vector<double> apply_shift(std::vector<double> x, const DomainShift& shift) {
  for (std::size_t p = 0; p < shift.rotations.size(); ++p) {
    const std::size_t a = 2 * p;
    const std::size_t b = a + 1;
    const double c = std::cos(shift.rotations[p]);
    const double s = std::sin(shift.rotations[p]);
    const double xa = x[a];
    const double xb = x[b];
    x[a] = c * xa - s * xb;
    x[b] = s * xa + c * xb;
  }
  for (std::size_t k = 0; k < x.size(); ++k) {
    x[k] *= shift.scale;
    if (!shift.translation.empty()) x[k] += shift.translation[k];
  }
  return x;
}

std::string format_double(double v) { return fmt::format("{:.17g}", v); }

void write_sample(std::ostream& out, const Sample& s, const char* split) {
  out << "{\"domain\":" << s.domain << ",\"split\":\"" << split << "\",\"label\":";
  if (s.label) {
    out << *s.label;
  } else {
    out << "null";
  }
  out << ",\"features\":[";
  for (std::size_t k = 0; k < s.features.size(); ++k) {
    if (k > 0) out << ',';
    out << format_double(s.features[k]);
  }
  out << "]}\n";
}

}  // namespace

void validate_bundle(const DatasetBundle& bundle) {
  const int M = bundle.num_sources();
  if (M < 2) throw ValidationError(fmt::format("need at least 2 source domains, got {}", M));
  if (bundle.num_classes < 2) {
    throw ValidationError(fmt::format("need at least 2 classes, got {}", bundle.num_classes));
  }
  if (bundle.dim < 1) throw ValidationError("feature dimension must be positive");
  if (bundle.target_train.empty()) throw ValidationError("target_train must be non-empty");
  if (!bundle.domain_names.empty() && static_cast<int>(bundle.domain_names.size()) != M + 1) {
    throw ValidationError(fmt::format("expected {} domain names, got {}", M + 1,
                                      bundle.domain_names.size()));
  }
  for (int i = 0; i < M; ++i) {
    const auto& src = bundle.sources[static_cast<std::size_t>(i)];
    check_set(src, fmt::format("source {}", i), bundle.dim, bundle.num_classes, true, false);
    std::vector<int> seen(static_cast<std::size_t>(bundle.num_classes), 0);
    for (const auto& s : src) ++seen[static_cast<std::size_t>(*s.label)];
    for (int k = 0; k < bundle.num_classes; ++k) {
      if (seen[static_cast<std::size_t>(k)] == 0) {
        throw ValidationError(fmt::format("class {} is missing from source {}", k, i));
      }
    }
  }
  check_set(bundle.target_train, "target_train", bundle.dim, bundle.num_classes, false, true);
  check_set(bundle.target_test, "target_test", bundle.dim, bundle.num_classes, true, false);
}

void validate_spec(const SyntheticSpec& spec) {
  if (spec.num_sources < 2) throw ConfigError("num_sources must be >= 2");
  if (spec.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (spec.dim < 2) throw ConfigError("dim must be >= 2");
  if (spec.samples_per_class < 4) throw ConfigError("samples_per_class must be >= 4");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(spec.class_separation > 0.0)) throw ConfigError("class_separation must be > 0");
  const auto domains = static_cast<std::size_t>(spec.num_sources + 1);
  if (!spec.domain_shift.empty()) {
    if (spec.domain_shift.size() != domains) {
      throw ConfigError(fmt::format("domain_shift needs {} entries (sources then target), got {}",
                                    domains, spec.domain_shift.size()));
    }
    for (const auto& shift : spec.domain_shift) {
      if (2 * shift.rotations.size() > static_cast<std::size_t>(spec.dim)) {
        throw ConfigError("more rotation planes than the dimension allows");
      }
      if (!shift.translation.empty() &&
          shift.translation.size() != static_cast<std::size_t>(spec.dim)) {
        throw ConfigError("translation length must equal dim");
      }
    }
  }
  if (!spec.class_priors.empty()) {
    if (spec.class_priors.size() != domains) {
      throw ConfigError("class_priors needs one row per domain");
    }
    for (const auto& row : spec.class_priors) {
      if (row.size() != static_cast<std::size_t>(spec.num_classes)) {
        throw ConfigError("class_priors rows need num_classes entries");
      }
      for (double w : row) {
        if (!(w >= 0.0)) throw ConfigError("class_priors entries must be >= 0");
      }
    }
    for (int i = 0; i < spec.num_sources; ++i) {
      for (int c : class_counts(spec, i)) {
        if (c < 1) throw ConfigError("class_priors leave a class empty in a source domain");
      }
    }
  }
}

DatasetBundle generate_synthetic(const SyntheticSpec& spec) {
  validate_spec(spec);
  const int M = spec.num_sources;
  const int K = spec.num_classes;
  const auto d = static_cast<std::size_t>(spec.dim);
  std::mt19937_64 rng(spec.seed);

  // Class prototypes: random directions on a sphere of radius class_separation.
  std::vector<std::vector<double>> prototypes(static_cast<std::size_t>(K), std::vector<double>(d));
  for (auto& proto : prototypes) {
    double norm2 = 0.0;
    for (auto& v : proto) {
      v = standard_normal(rng);
      norm2 += v * v;
    }
    const double scale = spec.class_separation / std::sqrt(norm2);
    for (auto& v : proto) v *= scale;
  }

  auto draw = [&](int domain, int klass) {
    std::vector<double> x(d);
    for (std::size_t k = 0; k < d; ++k) {
      x[k] = prototypes[static_cast<std::size_t>(klass)][k] + spec.noise_sigma * standard_normal(rng);
    }
    if (!spec.domain_shift.empty()) {
      x = apply_shift(std::move(x), spec.domain_shift[static_cast<std::size_t>(domain)]);
    }
    return x;
  };

  auto fill = [&](SampleSet& set, int domain, bool keep_label) {
    const auto counts = class_counts(spec, domain);
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < counts[static_cast<std::size_t>(k)]; ++j) {
        Sample s;
        s.features = draw(domain, k);
        s.domain = domain;
        if (keep_label) s.label = k;
        set.push_back(std::move(s));
      }
    }
  };

  DatasetBundle bundle;
  bundle.num_classes = K;
  bundle.dim = spec.dim;
  bundle.sources.resize(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    fill(bundle.sources[static_cast<std::size_t>(i)], i, true);
    bundle.domain_names.push_back(fmt::format("source{}", i));
  }
  fill(bundle.target_train, M, false);
  fill(bundle.target_test, M, true);
  bundle.domain_names.emplace_back("target");
  return bundle;
}

void save_vectors(const DatasetBundle& bundle, const std::filesystem::path& path) {
  validate_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));

  std::vector<std::string> names = bundle.domain_names;
  if (names.empty()) {
    for (int i = 0; i < bundle.num_sources(); ++i) names.push_back(fmt::format("source{}", i));
    names.emplace_back("target");
  }
  out << "{\"format\":\"" << kFormatName << "\",\"version\":" << kFormatVersion
      << ",\"dim\":" << bundle.dim << ",\"num_classes\":" << bundle.num_classes
      << ",\"domains\":[";
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (k > 0) out << ',';
    out << nlohmann::json(names[k]).dump();
  }
  out << "]}\n";
  for (const auto& src : bundle.sources) {
    for (const auto& s : src) write_sample(out, s, "source");
  }
  for (const auto& s : bundle.target_train) write_sample(out, s, "target_train");
  for (const auto& s : bundle.target_test) write_sample(out, s, "target_test");
  out.flush();
  if (!out) throw IoError(fmt::format("failed while writing '{}'", path.string()));
}

DatasetBundle load_vectors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));

  DatasetBundle bundle;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  int num_domains = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(fmt::format("{}:{}: malformed JSON: {}", path.string(), line_no, e.what()));
    }
    try {
      if (!have_header) {
        if (!obj.is_object() || obj.value("format", std::string{}) != kFormatName) {
          throw ParseError(fmt::format("{}:{}: missing '{}' header", path.string(), line_no,
                                       kFormatName));
        }
        if (obj.at("version").get<int>() != kFormatVersion) {
          throw SchemaError(fmt::format("{}:{}: unsupported version {}", path.string(), line_no,
                                        obj.at("version").dump()));
        }
        bundle.dim = obj.at("dim").get<int>();
        bundle.num_classes = obj.at("num_classes").get<int>();
        bundle.domain_names = obj.at("domains").get<std::vector<std::string>>();
        num_domains = static_cast<int>(bundle.domain_names.size());
        if (num_domains < 3) {
          throw SchemaError(fmt::format("{}:{}: need at least 2 sources plus a target domain",
                                        path.string(), line_no));
        }
        bundle.sources.resize(static_cast<std::size_t>(num_domains - 1));
        have_header = true;
        continue;
      }
      Sample s;
      s.domain = obj.at("domain").get<int>();
      const auto split = obj.at("split").get<std::string>();
      const auto& label = obj.at("label");
      if (!label.is_null()) s.label = label.get<int>();
      s.features = obj.at("features").get<std::vector<double>>();
      if (static_cast<int>(s.features.size()) != bundle.dim) {
        throw SchemaError(fmt::format("{}:{}: features length {} differs from header dim {}",
                                      path.string(), line_no, s.features.size(), bundle.dim));
      }
      const int target = num_domains - 1;
      if (split == "source") {
        if (s.domain < 0 || s.domain >= target) {
          throw SchemaError(fmt::format("{}:{}: source sample has domain {} outside [0, {})",
                                        path.string(), line_no, s.domain, target));
        }
        bundle.sources[static_cast<std::size_t>(s.domain)].push_back(std::move(s));
      } else if (split == "target_train" || split == "target_test") {
        if (s.domain != target) {
          throw SchemaError(fmt::format("{}:{}: target sample must use domain {} (last), got {}",
                                        path.string(), line_no, target, s.domain));
        }
        (split == "target_train" ? bundle.target_train : bundle.target_test).push_back(std::move(s));
      } else {
        throw SchemaError(fmt::format("{}:{}: unknown split '{}'", path.string(), line_no, split));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  if (!have_header) throw ParseError(fmt::format("{}: empty vector file", path.string()));
  validate_bundle(bundle);
  return bundle;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t set_size, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw ContractError("batch_size must be >= 2");
  std::vector<std::size_t> order(set_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ epoch);
  fisher_yates(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < set_size; start += batch_size) {
    const std::size_t stop = std::min(set_size, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

Batch make_batch(const SampleSet& set, std::span<const std::size_t> indices) {
  Batch batch;
  if (indices.empty()) return batch;
  const auto d = static_cast<Index>(set[indices[0]].features.size());
  batch.x.resize(static_cast<Index>(indices.size()), d);
  batch.domain = set[indices[0]].domain;
  bool any_label = false;
  std::vector<int> labels(indices.size(), -1);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = set[indices[r]];
    for (Index c = 0; c < d; ++c) batch.x(static_cast<Index>(r), c) = s.features[static_cast<std::size_t>(c)];
    if (s.label) {
      labels[r] = *s.label;
      any_label = true;
    }
  }
  if (any_label) batch.labels = std::move(labels);
  return batch;
}

Batch make_batch(const SampleSet& set) {
  std::vector<std::size_t> all(set.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(set, all);
}

Tensor2 features_matrix(const SampleSet& set) { return make_batch(set).x; }

DatasetBundle split_source_holdout(const DatasetBundle& bundle, double fraction,
                                   std::uint64_t seed, std::vector<SampleSet>& holdout) {
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("holdout fraction must be in [0, 1)");
  DatasetBundle train = bundle;
  holdout.assign(bundle.sources.size(), {});
  if (fraction == 0.0) return train;
  for (std::size_t i = 0; i < bundle.sources.size(); ++i) {
    const SampleSet& src = bundle.sources[i];
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(bundle.num_classes));
    for (std::size_t j = 0; j < src.size(); ++j) by_class[static_cast<std::size_t>(*src[j].label)].push_back(j);
    std::mt19937_64 rng(mix_seed(seed, i));
    std::vector<bool> held(src.size(), false);
    for (auto& members : by_class) {
      fisher_yates(members, rng);
      auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size())));
      count = std::min(count, members.size() > 0 ? members.size() - 1 : 0);
      for (std::size_t k = 0; k < count; ++k) held[members[k]] = true;
    }
    SampleSet kept;
    for (std::size_t j = 0; j < src.size(); ++j) {
      (held[j] ? holdout[i] : kept).push_back(src[j]);
    }
    train.sources[i] = std::move(kept);
  }
  return train;
}

}  // namespace mshift
