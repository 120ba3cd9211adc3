#pragma once

#include <string>
#include <vector>

namespace difftalk {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Central-difference checks of every differentiable op and composite block, relative error
/// tolerance 1e-4.
std::vector<CheckResult> gradient_checks();

/// Forward noising reductions, partial-noising row preservation, loss mask insensitivity,
/// one-step inversion and alpha_bar consistency.
std::vector<CheckResult> diffusion_algebra_checks();

/// Landmark split/merge and normalization round trips, checkpoint round trip, audio locality,
/// upper-half preservation and the frozen-base contract on small models.
std::vector<CheckResult> structural_checks();

/// All of the above in order.
std::vector<CheckResult> run_selfcheck();

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace difftalk
