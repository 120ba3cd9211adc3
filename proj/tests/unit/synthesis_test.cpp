#include <gtest/gtest.h>

#include <cmath>

#include "difftalk/errors.hpp"
#include "difftalk/gradcheck.hpp"
#include "difftalk/synthesis.hpp"

using namespace difftalk;

namespace {

SynthesisConfig small_config() {
  SynthesisConfig c;
  c.image_size = 32;
  c.unet.c1 = 8;
  c.unet.c2 = 16;
  c.unet.groups = 2;
  c.unet.time_dim = 16;
  c.unet.ctx_dim = 8;
  c.diffusion_steps = 10;
  return c;
}

const Dataset& tiny_set() {
  static const Dataset ds = generate_dataset(48, 13, 32);
  return ds;
}

void randomize_matching(ParamStore& store, const std::string& prefix, const std::string& needle,
                        double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (const auto& p : store.paths(prefix)) {
    if (p.find(needle) == std::string::npos) continue;
    Tensor t = store.get(p);
    for (auto& v : t.mutable_data()) v = normal(rng);
  }
}

bool all_finite(const Tensor& t) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

}  // namespace

TEST(Autoencoder, LatentShapeAndDeterminism) {
  const Dataset ds = generate_dataset(2, 3, 64);
  FaceSynthesizer a({}, 4), b({}, 4);
  const Tensor za = a.encode(ds.images);
  EXPECT_EQ(za.shape(), (Shape{2, 4, 8, 8}));
  const Tensor zb = b.encode(ds.images);
  for (std::size_t i = 0; i < za.numel(); ++i) ASSERT_EQ(za[i], zb[i]);
  EXPECT_EQ(a.params().checksum("synth"), b.params().checksum("synth"));
  NoGradGuard g;
  const Tensor x = a.autoencoder().decode(za);
  EXPECT_EQ(x.shape(), (Shape{2, 1, 64, 64}));
}

TEST(Autoencoder, ImageTensorRoundTrip) {
  const Dataset ds = generate_dataset(1, 3, 32);
  const Tensor t = images_to_tensor(ds.images);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 32, 32}));
  const GrayImage back = tensor_to_image(t);
  for (std::size_t i = 0; i < back.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], ds.images[0].pixels[i], 1e-9);
}

TEST(CondUNet, ShapeAndTimestepSensitivity) {
  FaceSynthesizer s(small_config(), 1);
  Rng rng(2);
  const Tensor z = Tensor::randn({2, 4, 4, 4}, rng);
  const std::vector<std::size_t> t1 = {1, 1}, t2 = {1, 9};
  NoGradGuard g;
  const Tensor e1 = s.base_eps(z, t1);
  const Tensor e2 = s.base_eps(z, t2);
  EXPECT_EQ(e1.shape(), z.shape());
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(e1[i], e2[i]);
  double diff = 0.0;
  for (std::size_t i = 64; i < 128; ++i) diff = std::max(diff, std::abs(e1[i] - e2[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(CondUNet, GradcheckThroughCrossAttention) {
  ParamStore store;
  Rng rng(5);
  UNetConfig cfg;
  cfg.c1 = 8;
  cfg.c2 = 16;
  cfg.groups = 2;
  cfg.time_dim = 16;
  cfg.ctx_dim = 8;
  CondUNet unet(store, "u", cfg, rng);
  Tensor z = Tensor::randn({1, 4, 4, 4}, rng, 1.0, true);
  Tensor tokens = Tensor::randn({1, 3, 8}, rng, 1.0, true);
  Tensor target = Tensor::randn({1, 4, 4, 4}, rng);
  const std::vector<std::size_t> t = {3};
  std::vector<Tensor> inputs = {z, tokens};
  for (const auto& p : store.paths("u")) {
    if (p.find("attn") != std::string::npos) inputs.push_back(store.get(p));
  }
  ASSERT_GT(inputs.size(), 2u);
  const auto r = check_gradients([&] { return ops::mse(unet.forward(z, t, tokens), target); }, inputs,
                                 1e-5, 6, 11);
  EXPECT_LE(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 20u);
}

TEST(LandmarkBranch, TokensShapesAndSensitivity) {
  FaceSynthesizer s(small_config(), 1);
  const auto& ds = tiny_set();
  NoGradGuard g;
  std::vector<Landmark68> lms = {ds.landmarks[0], ds.landmarks[20]};
  const auto tok = s.landmark_tokens(lms);
  EXPECT_EQ(tok[0].shape(), (Shape{2, 4, 16}));
  EXPECT_EQ(tok[1].shape(), (Shape{2, 16, 8}));
  double diff = 0.0;
  for (std::size_t i = 0; i < 16 * 8; ++i) diff = std::max(diff, std::abs(tok[1][i] - tok[1][16 * 8 + i]));
  EXPECT_GT(diff, 1e-9);

  const Tensor zero = Tensor::zeros({1, 1, 32, 32});
  const auto zt = s.landmark_encoder().forward(zero);
  EXPECT_TRUE(all_finite(zt[0]));
  EXPECT_TRUE(all_finite(zt[1]));
}

TEST(LandmarkBranch, ZeroTokensReproduceBase) {
  FaceSynthesizer s(small_config(), 2);
  randomize_matching(s.params(), "synth.lmenc", ".wo.", 0.3, 3);
  Rng rng(4);
  const Tensor z = Tensor::randn({2, 4, 4, 4}, rng);
  const std::vector<std::size_t> t = {2, 7};
  NoGradGuard g;
  const Tensor base = s.base_eps(z, t);
  const std::array<Tensor, 2> zero = {Tensor::zeros({2, 4, 16}), Tensor::zeros({2, 16, 8})};
  const Tensor nulled = s.dual_eps(z, t, zero);
  for (std::size_t i = 0; i < base.numel(); ++i) ASSERT_EQ(base[i], nulled[i]);

  const auto& ds = tiny_set();
  std::vector<Landmark68> lms = {ds.landmarks[1], ds.landmarks[2]};
  const Tensor cond = s.dual_eps(z, t, s.landmark_tokens(lms));
  double diff = 0.0;
  for (std::size_t i = 0; i < base.numel(); ++i) diff = std::max(diff, std::abs(base[i] - cond[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(LandmarkBranch, GradcheckEndToEnd) {
  FaceSynthesizer s(small_config(), 3);
  randomize_matching(s.params(), "synth.lmenc", ".wo.", 0.3, 5);
  const auto& ds = tiny_set();
  std::vector<Landmark68> lms = {ds.landmarks[4]};
  Rng rng(6);
  const Tensor z = Tensor::randn({1, 4, 4, 4}, rng);
  const Tensor eps = Tensor::randn({1, 4, 4, 4}, rng);
  const std::vector<std::size_t> t = {5};
  std::vector<Tensor> inputs;
  for (const auto& p : s.params().paths("synth.lmenc")) inputs.push_back(s.params().get(p));
  const auto r = check_gradients(
      [&] { return masked_noise_loss(s.dual_eps(z, t, s.landmark_tokens(lms)), eps); }, inputs, 1e-5, 2, 7);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(FaceSynthesizer, StagesFreezeAndGenerate) {
  const auto& ds = tiny_set();
  FaceSynthesizer s(small_config(), 7);
  StageConfig sc;
  sc.epochs = 1;
  sc.batch_size = 8;
  sc.train_begin = 0;
  sc.train_end = 32;
  sc.val_begin = 32;
  sc.val_end = 48;
  sc.val_limit = 16;
  const auto ae = s.pretrain_autoencoder(ds, sc);
  ASSERT_EQ(ae.train_loss.size(), 1u);
  EXPECT_TRUE(std::isfinite(ae.val_loss[0]));
  EXPECT_GT(s.autoencoder().latent_scale(), 0.0);
  s.pretrain_base(ds, sc);
  const auto ae_sum = s.params().checksum("synth.ae");
  const auto base_sum = s.params().checksum("synth.base");
  const auto lm_sum = s.params().checksum("synth.lmenc");
  const auto res = s.train_synthesis(ds, ds.landmarks, sc);
  EXPECT_TRUE(std::isfinite(res.train_loss[0]));
  EXPECT_EQ(s.params().checksum("synth.ae"), ae_sum);
  EXPECT_EQ(s.params().checksum("synth.base"), base_sum);
  EXPECT_NE(s.params().checksum("synth.lmenc"), lm_sum);

  StageConfig bad = sc;
  bad.lr = -1.0;
  EXPECT_THROW(s.train_synthesis(ds, ds.landmarks, bad), ValidationError);

  const GrayImage& src = ds.images[40];
  const auto f1 = s.generate_face(src, ds.landmarks[40], 99);
  const auto f2 = s.generate_face(src, ds.landmarks[40], 99);
  ASSERT_TRUE(f1.image.same_shape(src));
  EXPECT_EQ(f1.image, f2.image);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 32; ++x) ASSERT_EQ(f1.image.at(x, y), src.at(x, y));
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t k = (c * 4 + i) * 4 + j;
        ASSERT_EQ(f1.latent[k], f1.z0_upper[k]);
      }
  for (double v : f1.image.pixels) ASSERT_EQ(v, std::round(v));
}
