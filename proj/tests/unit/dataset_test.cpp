#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "difftalk/dataset.hpp"
#include "difftalk/errors.hpp"

namespace fs = std::filesystem;
using namespace difftalk;

TEST(FaceLandmarks, InnerLipGap) {
  FaceParams p;
  p.mouth = 0.0;
  const Landmark68 closed = landmarks_from_params(p);
  EXPECT_EQ(inner_lip_gap(closed), 0.0);
  EXPECT_EQ(closed.points[61].y, closed.points[67].y);
  EXPECT_EQ(closed.points[63].y, closed.points[65].y);

  p.mouth = 1.0;
  p.ry = 0.3;
  EXPECT_NEAR(inner_lip_gap(landmarks_from_params(p)), 0.054, 1e-15);
}

TEST(FaceLandmarks, InsideCanvasAtRangeCorners) {
  const auto& r = kFaceRanges;
  for (int mask = 0; mask < 128; ++mask) {
    FaceParams p;
    p.cx = mask & 1 ? r.cx.hi : r.cx.lo;
    p.cy = mask & 2 ? r.cy.hi : r.cy.lo;
    p.rx = mask & 4 ? r.rx.hi : r.rx.lo;
    p.ry = mask & 8 ? r.ry.hi : r.ry.lo;
    p.yaw = mask & 16 ? r.yaw.hi : r.yaw.lo;
    p.eye = mask & 32 ? r.eye.hi : r.eye.lo;
    p.mouth = mask & 64 ? 1.0 : 0.0;
    EXPECT_TRUE(landmarks_from_params(p).in_unit_square()) << mask;
  }
}

TEST(FaceParamsCheck, RejectsOutOfRange) {
  FaceParams p;
  EXPECT_NO_THROW(validate(p));
  p.mouth = 1.2;
  try {
    validate(p);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("mouth"), std::string::npos);
  }
}

TEST(Render, DeterministicAndBalanced) {
  FaceParams p;
  const GrayImage a = render(p, 64);
  EXPECT_EQ(a, render(p, 64));
  const double mean = std::accumulate(a.pixels.begin(), a.pixels.end(), 0.0) / a.pixels.size();
  EXPECT_GE(mean, 20.0);
  EXPECT_LE(mean, 235.0);
  for (double v : a.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 255.0);
  }
}

TEST(Render, MouthChangesOnlyInsideMouthBox) {
  FaceParams p;
  p.yaw = 0.02;
  p.mouth = 0.0;
  const Landmark68 l0 = landmarks_from_params(p);
  const GrayImage a = render(p, 64);
  p.mouth = 1.0;
  const Landmark68 l1 = landmarks_from_params(p);
  const GrayImage b = render(p, 64);

  double x0 = 1, y0 = 1, x1 = 0, y1 = 0;
  for (const auto* lm : {&l0, &l1}) {
    for (std::size_t i = 48; i < 68; ++i) {
      x0 = std::min(x0, lm->points[i].x);
      y0 = std::min(y0, lm->points[i].y);
      x1 = std::max(x1, lm->points[i].x);
      y1 = std::max(y1, lm->points[i].y);
    }
  }
  std::size_t changed = 0;
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const bool inside = x >= std::floor(x0 * 64) && x <= std::floor(x1 * 64) &&
                          y >= std::floor(y0 * 64) && y <= std::floor(y1 * 64);
      if (a.at(x, y) != b.at(x, y)) {
        ++changed;
        EXPECT_TRUE(inside) << x << "," << y;
      }
    }
  }
  EXPECT_GT(changed, 10u);
}

TEST(Dataset, CountsOracleAndDeterminism) {
  const fs::path dir = fs::temp_directory_path() / "difftalk_ds";
  fs::remove_all(dir);
  const Dataset ds = gen_sequence(100, 9, 64, dir);
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(dir / "images")) images += e.path().extension() == ".pgm";
  EXPECT_EQ(images, 100u);

  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.size(), 100u);
  EXPECT_EQ(back.landmarks.size(), 100u);
  EXPECT_EQ(back.audio.size(), 100u);
  EXPECT_EQ(back.seed, 9u);
  for (std::size_t f = 0; f < back.size(); ++f) {
    EXPECT_NO_THROW(validate(back.params[f]));
    const Landmark68 oracle = landmarks_from_params(back.params[f]);
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
      ASSERT_NEAR(back.landmarks[f].points[i].x, oracle.points[i].x, 1e-9);
      ASSERT_NEAR(back.landmarks[f].points[i].y, oracle.points[i].y, 1e-9);
    }
    EXPECT_EQ(back.images[f], ds.images[f]);
  }

  const Dataset again = generate_dataset(100, 9, 64);
  EXPECT_EQ(again.params, ds.params);
  EXPECT_EQ(again.images, ds.images);
  EXPECT_EQ(again.audio.frames, ds.audio.frames);

  // the mouth signal actually moves
  const auto [lo, hi] = std::minmax_element(ds.params.begin(), ds.params.end(),
                                            [](auto& a, auto& b) { return a.mouth < b.mouth; });
  EXPECT_GT(hi->mouth - lo->mouth, 0.4);
}

TEST(Dataset, NoiselessAudioEncodesMouth) {
  const Dataset ds = generate_dataset(30, 4, 32, 0.0);
  const AudioCode code = make_audio_code(dataset_audio_seed(4));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.audio.frames[i], encode_mouth(code, ds.params[i].mouth));
  }
}

TEST(FitParams, RecoversLandmarksFromRender) {
  FaceParams p;
  p.cx = 0.53;
  p.cy = 0.47;
  p.rx = 0.28;
  p.ry = 0.38;
  p.yaw = -0.01;
  p.eye = 0.7;
  p.mouth = 0.65;
  const GrayImage img = quantize8(render(p, 64));
  const Landmark68 truth = landmarks_from_params(p);
  const Landmark68 fit = landmarks_from_params(fit_params(img));
  double ld = 0.0;
  for (std::size_t i : RegionPartition::standard().predicted()) {
    ld += std::hypot(fit.points[i].x - truth.points[i].x, fit.points[i].y - truth.points[i].y);
  }
  ld /= kPredictedCount;
  EXPECT_LT(ld, 0.005);
}
