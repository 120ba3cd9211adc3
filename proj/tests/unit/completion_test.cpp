#include <gtest/gtest.h>

#include <cmath>

#include "difftalk/completion.hpp"
#include "difftalk/errors.hpp"
#include "difftalk/gradcheck.hpp"

using namespace difftalk;

namespace {

const Dataset& small_set() {
  static const Dataset ds = generate_dataset(240, 21, 32);
  return ds;
}

std::vector<Point> upper_of(std::size_t frame) {
  return split(small_set().landmarks[frame]).upper;
}

void randomize(ParamStore& store, const std::string& path, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = store.get(path);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : t.mutable_data()) v = normal(rng);
}

}  // namespace

TEST(Completion, StageShapes) {
  CompletionModel m({}, 1);
  const auto up = upper_of(3);
  const auto lower = m.lf_forward(up);
  EXPECT_EQ(lower.size(), 9u);
  std::vector<Point> contour = up;
  contour.insert(contour.end(), lower.begin(), lower.end());
  const auto mouth = m.bm_forward(contour);
  EXPECT_EQ(mouth.size(), 20u);
  const auto off = m.am_forward(up, m.embed(window(small_set().audio, 3)), mouth);
  EXPECT_EQ(off.size(), 20u);
  EXPECT_EQ(m.lf_forward(up), lower);

  EXPECT_THROW(m.lf_forward(std::vector<Point>(38)), ValidationError);
  EXPECT_THROW(m.bm_forward(std::vector<Point>(39)), ValidationError);
}

TEST(Completion, ParameterGroups) {
  CompletionModel m({}, 1);
  for (const auto& p : m.params().paths("")) {
    EXPECT_TRUE(has_prefix(p, "completion.lf") || has_prefix(p, "completion.bm") ||
                has_prefix(p, "completion.am") || has_prefix(p, "completion.audio"))
        << p;
  }
  EXPECT_GT(m.params().parameter_count("completion.am"), 0u);
  EXPECT_GT(m.params().parameter_count("completion.audio"), 0u);

  CompletionConfig abl;
  abl.ablate_am = true;
  CompletionModel a(abl, 1);
  EXPECT_EQ(a.params().parameter_count("completion.am"), 0u);
}

TEST(Completion, ZeroInitOffsetsAndStagesCompose) {
  CompletionModel m({}, 2);
  const auto up = upper_of(5);
  const AudioWindow w = window(small_set().audio, 5);
  const Landmark68 full = m.complete(up, w);

  const auto lower = m.lf_forward(up);
  std::vector<Point> contour = up;
  contour.insert(contour.end(), lower.begin(), lower.end());
  const auto base = m.bm_forward(contour);
  const auto off = m.am_forward(up, m.embed(w), base);
  for (const auto& o : off) {
    EXPECT_EQ(o.x, 0.0);
    EXPECT_EQ(o.y, 0.0);
  }
  const auto& part = RegionPartition::standard();
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(full.points[part.lower_contour[i]].x, lower[i].x, 1e-12);
    EXPECT_NEAR(full.points[part.lower_contour[i]].y, lower[i].y, 1e-12);
  }
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_NEAR(full.points[48 + i].x, base[i].x, 1e-12);
    EXPECT_NEAR(full.points[48 + i].y, base[i].y, 1e-12);
  }
}

TEST(Completion, OffsetsBoundedAndAdditive) {
  CompletionModel m({}, 3);
  randomize(m.params(), "completion.am.out.fc2.weight", 20.0, 4);
  randomize(m.params(), "completion.am.out.fc2.bias", 20.0, 5);
  const auto& ds = small_set();
  std::vector<std::size_t> frames = {0, 10, 50, 100, 200};
  const CompletionBatch b = completion_inputs(ds, frames);
  NoGradGuard no_grad;
  std::vector<std::vector<double>> flat;
  std::vector<double> up;
  for (const auto& u : b.uppers) {
    for (const auto& p : u) {
      up.push_back(p.x);
      up.push_back(p.y);
    }
  }
  const auto out = m.forward(Tensor::from_data({frames.size(), 39, 2}, up), windows_to_tensor(b.windows));
  double max_abs = 0.0;
  for (std::size_t i = 0; i < out.offsets.numel(); ++i) {
    max_abs = std::max(max_abs, std::abs(out.offsets[i]));
    EXPECT_LE(std::abs(out.offsets[i]), 0.15);
    EXPECT_EQ(out.mouth[i], out.base_mouth[i] + out.offsets[i]);
  }
  EXPECT_GT(max_abs, 0.1);
}

TEST(Completion, AudioSwapTouchesOnlyMouth) {
  CompletionModel m({}, 4);
  randomize(m.params(), "completion.am.out.fc2.weight", 0.5, 6);
  const auto& ds = small_set();
  const auto up = upper_of(142 % ds.size());
  const Landmark68 a = m.complete(up, window(ds.audio, 142 % ds.size()));
  const Landmark68 b = m.complete(up, window(ds.audio, 224 % ds.size()));
  for (std::size_t i = 0; i < 48; ++i) {
    EXPECT_EQ(a.points[i], b.points[i]) << i;
  }
  std::size_t changed = 0;
  for (std::size_t i = 48; i < 68; ++i) changed += !(a.points[i] == b.points[i]);
  EXPECT_GT(changed, 0u);
  for (std::size_t k = 0; k < 39; ++k) EXPECT_EQ(a.points[RegionPartition::standard().upper_input[k]], up[k]);
  EXPECT_EQ(a, m.complete(up, window(ds.audio, 142 % ds.size())));
}

TEST(CompletionLoss, HandValues) {
  const Landmark68 gt = small_set().landmarks[0];
  EXPECT_EQ(completion_loss(gt, gt), 0.0);
  Landmark68 p = gt;
  p.points[55].x += 0.3;
  p.points[55].y += 0.4;
  EXPECT_NEAR(completion_loss(p, gt), 0.25 / 29.0, 1e-15);
  EXPECT_NEAR(region_distance(p, gt), 0.5 / 29.0, 1e-15);
  Landmark68 q = gt;
  q.points[20].x += 0.5;
  q.points[2].y -= 0.2;
  EXPECT_EQ(completion_loss(q, gt), 0.0);

  // permuting points of R consistently in both leaves the loss unchanged
  Landmark68 pp = p, gg = gt;
  std::swap(pp.points[55], pp.points[4]);
  std::swap(gg.points[55], gg.points[4]);
  std::swap(pp.points[60], pp.points[12]);
  std::swap(gg.points[60], gg.points[12]);
  EXPECT_NEAR(completion_loss(pp, gg), completion_loss(p, gt), 1e-15);
}

TEST(Completion, LossGradientReachesAudioEncoder) {
  CompletionModel m({}, 5);
  randomize(m.params(), "completion.am.out.fc2.weight", 0.3, 7);
  const auto& ds = small_set();
  std::vector<std::size_t> frames = {7, 90};
  const CompletionBatch b = completion_inputs(ds, frames);
  std::vector<double> up, target;
  for (const auto& u : b.uppers) {
    for (const auto& p : u) {
      up.push_back(p.x);
      up.push_back(p.y);
    }
  }
  for (const auto& lm : b.targets) {
    for (auto i : RegionPartition::standard().predicted()) {
      target.push_back(lm.points[i].x + 0.01);
      target.push_back(lm.points[i].y - 0.02);
    }
  }
  const Tensor upper = Tensor::from_data({2, 39, 2}, up);
  const Tensor tgt = Tensor::from_data({2, 29, 2}, target);
  const Tensor win = windows_to_tensor(b.windows);
  std::vector<Tensor> inputs;
  for (std::size_t l = 0; l < 3; ++l) inputs.push_back(m.audio_encoder().conv_weight(l));
  const auto r = check_gradients(
      [&] { return ops::scale(ops::mse(m.forward(upper, win).predicted, tgt), 2.0); }, inputs, 1e-5, 12, 3);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Completion, TrainingLowersLossDeterministically) {
  const auto& ds = small_set();
  CompletionTrainConfig tc;
  tc.epochs = 3;
  tc.train_end = 200;
  tc.seed = 8;
  CompletionModel a({}, 8);
  const auto ra = train_completion(a, ds, tc);
  ASSERT_EQ(ra.epoch_loss.size(), 3u);
  for (double l : ra.epoch_loss) EXPECT_TRUE(std::isfinite(l));
  EXPECT_LT(ra.epoch_loss.back(), ra.epoch_loss.front());

  CompletionModel b({}, 8);
  const auto rb = train_completion(b, ds, tc);
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_EQ(a.params().checksum(""), b.params().checksum(""));
  EXPECT_LT(heldout_distance(a, ds, 200, 240), 0.1);

  CompletionTrainConfig bad = tc;
  bad.lr = 0.0;
  EXPECT_THROW(train_completion(b, ds, bad), ValidationError);
  bad = tc;
  bad.tempo_jitter = 1.5;
  EXPECT_THROW(train_completion(b, ds, bad), ValidationError);
  Dataset empty;
  EXPECT_THROW(train_completion(b, empty, tc), ValidationError);
}

TEST(Completion, AblationModeRuns) {
  CompletionConfig cfg;
  cfg.ablate_am = true;
  CompletionModel m(cfg, 9);
  const auto& ds = small_set();
  const auto up = upper_of(11);
  const Landmark68 a = m.complete(up, window(ds.audio, 11));
  const Landmark68 b = m.complete(up, window(ds.audio, 150));
  for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(a.points[i], b.points[i]);
  std::size_t changed = 0;
  for (std::size_t i = 48; i < 68; ++i) changed += !(a.points[i] == b.points[i]);
  EXPECT_GT(changed, 0u);
  const auto off = m.am_forward(up, m.embed(window(ds.audio, 11)), std::vector<Point>(20));
  for (const auto& o : off) EXPECT_EQ(o, (Point{0.0, 0.0}));
}
