#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "difftalk/diffusion.hpp"
#include "difftalk/errors.hpp"
#include "difftalk/gradcheck.hpp"

using namespace difftalk;

namespace {

double sq_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

bool row_equal(const Tensor& a, const Tensor& b, std::size_t slice, std::size_t row) {
  const std::size_t h = a.dim(a.ndim() - 2), w = a.dim(a.ndim() - 1);
  for (std::size_t x = 0; x < w; ++x) {
    const std::size_t i = (slice * h + row) * w + x;
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace

TEST(Schedule, SingleStep) {
  const NoiseSchedule s = make_schedule(1, 1e-4, 0.02);
  ASSERT_EQ(s.beta.size(), 1u);
  EXPECT_EQ(s.beta[0], 1e-4);
  EXPECT_EQ(s.alpha_bar[0], 1.0 - 1e-4);
  EXPECT_EQ(s.alpha_bar_at(0), 1.0);
}

TEST(Schedule, DefaultsConsistentAndMonotone) {
  const NoiseSchedule s = make_schedule();
  ASSERT_EQ(s.T, 50u);
  EXPECT_DOUBLE_EQ(s.beta.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta.back(), 0.02);
  double log_sum = 0.0;
  for (std::size_t t = 1; t <= s.T; ++t) {
    log_sum += std::log(1.0 - s.beta[t - 1]);
    EXPECT_NEAR(s.alpha_bar[t - 1], std::exp(log_sum), 1e-12) << t;
    EXPECT_EQ(s.alpha[t - 1], 1.0 - s.beta[t - 1]);
    EXPECT_GT(s.beta[t - 1], 0.0);
    EXPECT_LT(s.beta[t - 1], 1.0);
    if (t > 1) {
      EXPECT_GE(s.beta[t - 1], s.beta[t - 2]);
      EXPECT_LT(s.alpha_bar[t - 1], s.alpha_bar[t - 2]);
    }
  }
  EXPECT_LE(s.alpha_bar[0], 1.0 - s.beta[0]);
}

TEST(Schedule, RejectsBadRange) {
  EXPECT_THROW(make_schedule(0), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), ValidationError);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), ValidationError);
}

TEST(Schedule, DumpFormat) {
  std::ostringstream os;
  write_schedule(os, make_schedule(3, 0.1, 0.3));
  EXPECT_EQ(os.str(),
            "# t beta alpha alpha_bar\n"
            "1 0.1 0.9 0.9\n"
            "2 0.2 0.8 0.72\n"
            "3 0.3 0.7 0.504\n");
}

TEST(ForwardNoise, ZeroNoiseAndIdentityLimit) {
  Rng rng(1);
  const NoiseSchedule s = make_schedule();
  const Tensor z0 = Tensor::randn({4, 8, 8}, rng);
  const Tensor zt = forward_noise(z0, 20, Tensor::zeros(z0.shape()), s);
  const double a = std::sqrt(s.alpha_bar[19]);
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_EQ(zt[i], a * z0[i]);

  NoiseSchedule ident;
  ident.T = 1;
  ident.beta = {0.0};
  ident.alpha = {1.0};
  ident.alpha_bar = {1.0};
  const Tensor same = forward_noise(z0, 1, Tensor::randn(z0.shape(), rng), ident);
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_EQ(same[i], z0[i]);

  EXPECT_THROW(forward_noise(z0, 0, z0, s), std::out_of_range);
  EXPECT_THROW(forward_noise(z0, 51, z0, s), std::out_of_range);
  EXPECT_THROW(forward_noise(z0, 3, Tensor::zeros({4, 8, 7}), s), DimensionError);
}

TEST(ForwardNoise, SecondMomentMonteCarlo) {
  Rng rng(2);
  const NoiseSchedule s = make_schedule();
  const Tensor z0 = Tensor::randn({2, 4, 4}, rng);
  for (std::size_t t : {1u, 25u, 50u}) {
    double acc = 0.0;
    constexpr int kDraws = 10000;
    for (int d = 0; d < kDraws; ++d) acc += sq_norm(forward_noise(z0, t, Tensor::randn(z0.shape(), rng), s));
    const double ab = s.alpha_bar[t - 1];
    const double expected = ab * sq_norm(z0) + (1.0 - ab) * static_cast<double>(z0.numel());
    EXPECT_NEAR(acc / kDraws / expected, 1.0, 0.02) << t;
  }
}

TEST(PartialNoise, UpperRowsPreserved) {
  Rng rng(3);
  const NoiseSchedule s = make_schedule();
  const Tensor z0 = Tensor::randn({2, 4, 8, 8}, rng);
  const Tensor eps = Tensor::randn(z0.shape(), rng);
  EXPECT_EQ(upper_rows(8), 4u);
  for (std::size_t t : {std::size_t{1}, s.T / 2, s.T}) {
    const Tensor full = forward_noise(z0, t, eps, s);
    const Tensor part = partial_forward_noise(z0, t, eps, s);
    for (std::size_t slice = 0; slice < 8; ++slice) {
      for (std::size_t r = 0; r < 8; ++r) {
        if (r < 4) {
          EXPECT_TRUE(row_equal(part, z0, slice, r));
          EXPECT_FALSE(row_equal(part, full, slice, r));
        } else {
          EXPECT_TRUE(row_equal(part, full, slice, r));
          EXPECT_FALSE(row_equal(part, z0, slice, r));
        }
      }
    }
  }
}

TEST(MaskedLoss, Examples) {
  Rng rng(4);
  const Tensor e = Tensor::randn({4, 8, 8}, rng);
  EXPECT_EQ(lower_region_size(e.shape()), 128u);
  EXPECT_EQ(masked_noise_loss(e, e.clone()).item(), 0.0);

  Tensor upper_err = e.clone();
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 32; ++i) upper_err.mutable_data()[c * 64 + i] += 5.0;
  }
  EXPECT_EQ(masked_noise_loss(e, upper_err).item(), 0.0);

  Tensor one = e.clone();
  one.mutable_data()[2 * 64 + 6 * 8 + 3] += 2.0;
  EXPECT_NEAR(masked_noise_loss(e, one).item(), 4.0 / 128.0, 1e-15);
  EXPECT_NEAR(masked_noise_loss(e, one).item(), 0.03125, 1e-15);
}

TEST(MaskedLoss, Gradient) {
  Rng rng(5);
  const Tensor e = Tensor::randn({2, 4, 4}, rng);
  Tensor p = Tensor::randn({2, 4, 4}, rng, 1.0, true);
  const auto r = check_gradients([&] { return masked_noise_loss(e, p); }, {p});
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(Ddim, OneStepInversion) {
  Rng rng(6);
  const NoiseSchedule s = make_schedule();
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor z0 = Tensor::randn({4, 8, 8}, rng);
    const Tensor eps = Tensor::randn(z0.shape(), rng);
    const Tensor back = ddim_step(forward_noise(z0, 1, eps, s), eps, 1, s);
    for (std::size_t i = 0; i < z0.numel(); ++i) ASSERT_NEAR(back[i], z0[i], 1e-10);
  }
}

TEST(Ddim, ZeroEpsReduction) {
  Rng rng(7);
  const NoiseSchedule s = make_schedule();
  const Tensor z = Tensor::randn({4, 4}, rng);
  for (std::size_t t : {1u, 10u, 50u}) {
    const Tensor out = ddim_step(z, Tensor::zeros(z.shape()), t, s);
    const double k = std::sqrt(s.alpha_bar_at(t - 1) / s.alpha_bar_at(t));
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(out[i], k * z[i], 1e-14);
  }
}

TEST(Ddim, OracleLoopBounded) {
  Rng rng(8);
  const NoiseSchedule s = make_schedule(50, 1e-4, 0.2);
  const Tensor z0 = Tensor::randn({4, 8, 8}, rng);
  const Tensor eps = Tensor::randn(z0.shape(), rng);
  Tensor z = forward_noise(z0, s.T, eps, s);
  const double bound = 10.0 * std::sqrt(sq_norm(z0)) + 10.0;
  for (std::size_t t = s.T; t >= 1; --t) {
    z = ddim_step(z, eps, t, s);
    for (double v : z.data()) ASSERT_TRUE(std::isfinite(v));
    ASSERT_LE(std::sqrt(sq_norm(z)), bound);
    if (t > 1) {
      const Tensor expect = forward_noise(z0, t - 1, eps, s);
      for (std::size_t i = 0; i < z.numel(); ++i) ASSERT_NEAR(z[i], expect[i], 1e-9);
    }
  }
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_NEAR(z[i], z0[i], 1e-9);
}

TEST(SampleLoop, ClampsAndDeterministic) {
  Rng rng(9);
  const NoiseSchedule s = make_schedule(10, 1e-4, 0.2);
  const Tensor z0 = Tensor::randn({1, 4, 8, 8}, rng);
  std::size_t calls = 0;
  const EpsModel model = [&](const Tensor& z, std::size_t t, const Tensor&) {
    ++calls;
    EXPECT_GE(t, 1u);
    return ops::scale(z, 0.3);
  };
  const Tensor a = sample_loop(model, z0, Tensor(), s, 42);
  EXPECT_EQ(calls, 10u);
  for (std::size_t slice = 0; slice < 4; ++slice) {
    for (std::size_t r = 0; r < 4; ++r) EXPECT_TRUE(row_equal(a, z0, slice, r));
  }
  const Tensor b = sample_loop(model, z0, Tensor(), s, 42);
  EXPECT_EQ(std::vector<double>(a.data().begin(), a.data().end()),
            std::vector<double>(b.data().begin(), b.data().end()));
  const Tensor c = sample_loop(model, z0, Tensor(), s, 43);
  EXPECT_NE(std::vector<double>(a.data().begin(), a.data().end()),
            std::vector<double>(c.data().begin(), c.data().end()));
}
