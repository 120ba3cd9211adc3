#pragma once

#include <functional>
#include <vector>

#include "difftalk/tensor.hpp"

namespace difftalk {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Compares tape gradients of `loss_fn()` w.r.t. `inputs` against central differences.
/// Per-element error is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
/// With max_per_input > 0 a seeded subset of each input's elements is probed.
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                const std::vector<Tensor>& inputs, double step = 1e-5,
                                std::size_t max_per_input = 0, std::uint64_t seed = 0,
                                double abs_floor = 1e-6);

}  // namespace difftalk
