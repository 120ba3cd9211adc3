#include "difftalk/diffusion.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

struct GridGeometry {
  std::size_t slices, h, w;
};

GridGeometry geometry(const Shape& shape) {
  if (shape.size() < 2) throw DimensionError("latent grid needs (h, w) axes, got " + shape_str(shape));
  const std::size_t h = shape[shape.size() - 2], w = shape.back();
  if (h < 2) throw DimensionError("latent grid height must be at least 2, got " + shape_str(shape));
  return {numel(shape) / (h * w), h, w};
}

void check_step(std::size_t t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " +
                            std::to_string(s.T) + "]");
  }
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename F>
void for_each_row(const GridGeometry& g, F&& f) {
  for (std::size_t s = 0; s < g.slices; ++s) {
    for (std::size_t r = 0; r < g.h; ++r) f((s * g.h + r) * g.w, r);
  }
}

}  // namespace

double NoiseSchedule::alpha_bar_at(std::size_t t) const {
  if (t == 0) return 1.0;
  if (t > T) throw std::out_of_range("alpha_bar index " + std::to_string(t) + " beyond T");
  return alpha_bar[t - 1];
}

NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("diffusion steps T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValidationError("beta range must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  double prod = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    const double b = beta_start + frac * (beta_end - beta_start);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

void write_schedule(std::ostream& os, const NoiseSchedule& s) {
  os << "# t beta alpha alpha_bar\n";
  char buf[128];
  for (std::size_t t = 1; t <= s.T; ++t) {
    std::snprintf(buf, sizeof buf, "%zu %.12g %.12g %.12g\n", t, s.beta[t - 1], s.alpha[t - 1],
                  s.alpha_bar[t - 1]);
    os << buf;
  }
}

void write_schedule(const std::filesystem::path& file, const NoiseSchedule& s) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  write_schedule(os, s);
}

std::size_t upper_rows(std::size_t h) { return h / 2; }

std::size_t lower_region_size(const Shape& grid) {
  const auto g = geometry(grid);
  return g.slices * (g.h - upper_rows(g.h)) * g.w;
}

Tensor forward_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  check_step(t, s);
  check_same(z0, eps, "forward_noise");
  const double ab = s.alpha_bar[t - 1];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  const auto zv = z0.data();
  const auto ev = eps.data();
  std::vector<double> out(zv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * zv[i] + b * ev[i];
  return Tensor::from_data(z0.shape(), std::move(out));
}

Tensor partial_forward_noise(const Tensor& z0, std::size_t t, const Tensor& eps,
                             const NoiseSchedule& s) {
  return clamp_upper(forward_noise(z0, t, eps, s), z0);
}

Tensor clamp_upper(const Tensor& z, const Tensor& src) {
  check_same(z, src, "clamp_upper");
  const auto g = geometry(z.shape());
  const std::size_t up = upper_rows(g.h);
  std::vector<double> out(z.data().begin(), z.data().end());
  const auto sv = src.data();
  for_each_row(g, [&](std::size_t offset, std::size_t row) {
    if (row < up) std::copy(sv.begin() + offset, sv.begin() + offset + g.w, out.begin() + offset);
  });
  return Tensor::from_data(z.shape(), std::move(out));
}

Tensor masked_noise_loss(const Tensor& eps_true, const Tensor& eps_pred) {
  check_same(eps_true, eps_pred, "masked_noise_loss");
  const auto g = geometry(eps_true.shape());
  const std::size_t up = upper_rows(g.h);
  std::vector<double> mask(eps_true.numel(), 0.0);
  for_each_row(g, [&](std::size_t offset, std::size_t row) {
    if (row >= up) std::fill(mask.begin() + offset, mask.begin() + offset + g.w, 1.0);
  });
  const Tensor m = Tensor::from_data(eps_true.shape(), std::move(mask));
  const Tensor sq = ops::square(ops::sub(eps_pred, eps_true));
  return ops::scale(ops::sum(ops::mul(sq, m)),
                    1.0 / static_cast<double>(lower_region_size(eps_true.shape())));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, std::size_t t, const NoiseSchedule& s) {
  check_step(t, s);
  check_same(z_t, eps_pred, "ddim_step");
  const double ab_t = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
  const double noise_t = std::sqrt(1.0 - ab_t), noise_prev = std::sqrt(1.0 - ab_prev);
  const double sig_t = std::sqrt(ab_t), sig_prev = std::sqrt(ab_prev);
  const auto zv = z_t.data();
  const auto ev = eps_pred.data();
  std::vector<double> out(zv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (zv[i] - noise_t * ev[i]) / sig_t;
    out[i] = sig_prev * x0 + noise_prev * ev[i];
  }
  return Tensor::from_data(z_t.shape(), std::move(out));
}

Tensor sample_loop(const EpsModel& model, const Tensor& z0_upper, const Tensor& cond,
                   const NoiseSchedule& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor z = clamp_upper(Tensor::randn(z0_upper.shape(), rng), z0_upper);
  NoGradGuard no_grad;
  for (std::size_t t = s.T; t >= 1; --t) {
    const Tensor eps = model(z, t, cond);
    z = clamp_upper(ddim_step(z, eps, t, s), z0_upper);
  }
  return z;
}

}  // namespace difftalk
