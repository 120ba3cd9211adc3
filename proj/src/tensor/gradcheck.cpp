#include "difftalk/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace difftalk {

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                const std::vector<Tensor>& inputs, double step,
                                std::size_t max_per_input, std::uint64_t seed, double abs_floor) {
  for (auto t : inputs) t.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (!t.has_grad()) throw std::logic_error("check_gradients: input does not require grad");
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  GradCheckResult result;
  Rng rng(seed);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k];
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_per_input > 0 && idx.size() > max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_input);
    }
    auto values = t.mutable_data();
    for (auto i : idx) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = loss_fn().item();
      values[i] = orig - step;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace difftalk
