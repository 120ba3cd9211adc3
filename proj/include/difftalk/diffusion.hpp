#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

#include "difftalk/tensor.hpp"

namespace difftalk {

/// beta, alpha and alpha_bar are indexed by t - 1 for t = 1..T.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta, alpha, alpha_bar;

  /// alpha_bar for t in 0..T, with alpha_bar(0) = 1.
  double alpha_bar_at(std::size_t t) const;
};

/// Linear beta interpolation. Throws ValidationError on an invalid range.
NoiseSchedule make_schedule(std::size_t T = 50, double beta_start = 1e-4, double beta_end = 0.02);

/// "t beta alpha alpha_bar" rows with 12 significant digits.
void write_schedule(std::ostream& os, const NoiseSchedule& s);
void write_schedule(const std::filesystem::path& file, const NoiseSchedule& s);

/// Latent grids are tensors whose last two axes are (h, w); any leading axes are batch/channel.
/// The upper region is rows i < h/2 (0-based), the lower region the rest.
std::size_t upper_rows(std::size_t h);
std::size_t lower_region_size(const Shape& grid);

/// sqrt(ab_t) z0 + sqrt(1 - ab_t) eps. Plain values, no tape.
Tensor forward_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& s);

/// Upper rows copied from z0, lower rows as forward_noise.
Tensor partial_forward_noise(const Tensor& z0, std::size_t t, const Tensor& eps,
                             const NoiseSchedule& s);

/// Mean squared error over the lower region only; differentiable in eps_pred.
Tensor masked_noise_loss(const Tensor& eps_true, const Tensor& eps_pred);

/// Deterministic DDIM update from t to t-1.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, std::size_t t, const NoiseSchedule& s);

/// Overwrites the upper rows of `z` with those of `src`.
Tensor clamp_upper(const Tensor& z, const Tensor& src);

using EpsModel = std::function<Tensor(const Tensor& z_t, std::size_t t, const Tensor& cond)>;

/// Lower region starts from seeded N(0, 1), upper region from z0_upper (a full-shape grid whose
/// lower rows are ignored); upper rows are re-clamped after every step t = T..1.
Tensor sample_loop(const EpsModel& model, const Tensor& z0_upper, const Tensor& cond,
                   const NoiseSchedule& s, std::uint64_t seed);

}  // namespace difftalk
