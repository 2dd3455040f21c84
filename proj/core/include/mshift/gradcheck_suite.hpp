#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mshift/netcore.hpp"

namespace mshift {

struct GradcheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 11;
  /// Test fixture: perturb the analytic gradient of the named loss
  /// ("CE", "FCD", "CPA", "language-MMD", "SCL") before checking.
  std::optional<std::string> corrupt_loss;
};

struct GradcheckEntry {
  std::string loss;
  GradCheckReport report;
  double seconds = 0.0;
};

/// Finite-difference verification of all five training losses on a seeded
/// toy network (M=3, K=3, widths <= 8), each against exactly the tensors the
/// loss trains.
std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options = {});

}  // namespace mshift
