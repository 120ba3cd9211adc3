#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "difftalk/dataset.hpp"
#include "difftalk/errors.hpp"
#include "difftalk/landmarks.hpp"

namespace fs = std::filesystem;
using namespace difftalk;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("difftalk_lm_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Landmark68 sample_face() {
  FaceParams p;
  p.mouth = 0.7;
  p.yaw = 0.01;
  return landmarks_from_params(p);
}

}  // namespace

TEST(Partition, SizesAndCoverage) {
  const auto& part = RegionPartition::standard();
  EXPECT_EQ(part.upper_input.size(), 39u);
  EXPECT_EQ(part.lower_contour.size(), 9u);
  EXPECT_EQ(part.mouth.size(), 20u);
  EXPECT_EQ(part.predicted().size(), kPredictedCount);
  EXPECT_EQ(kPredictedCount, 29u);
  EXPECT_EQ(part.lower_contour.front(), 4u);
  EXPECT_EQ(part.lower_contour.back(), 12u);
  EXPECT_EQ(part.mouth.front(), 48u);
  EXPECT_NO_THROW(part.validate());

  RegionPartition broken = part;
  broken.mouth.pop_back();
  EXPECT_THROW(broken.validate(), std::logic_error);
  broken = part;
  broken.mouth.push_back(4);
  EXPECT_THROW(broken.validate(), std::logic_error);
}

TEST(Normalize, Examples) {
  std::vector<Point> px(68, Point{0.0, 0.0});
  px[5] = {256.0, 128.0};
  const Landmark68 lm = normalize(px, 512.0, 512.0);
  EXPECT_EQ(lm.points[5], (Point{0.5, 0.25}));
  EXPECT_EQ(lm.points[0], (Point{0.0, 0.0}));
}

TEST(Normalize, RoundTrip) {
  const Landmark68 lm = sample_face();
  const auto px = denormalize(lm, 640.0, 480.0);
  const Landmark68 back = normalize(px, 640.0, 480.0);
  for (std::size_t i = 0; i < kNumLandmarks; ++i) {
    EXPECT_NEAR(back.points[i].x, lm.points[i].x, 1e-12);
    EXPECT_NEAR(back.points[i].y, lm.points[i].y, 1e-12);
  }
}

TEST(Normalize, OutOfBoundsNamesIndex) {
  std::vector<Point> px(68, Point{10.0, 10.0});
  px[42] = {600.0, 10.0};
  try {
    normalize(px, 512.0, 512.0);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos) << e.what();
  }
  EXPECT_THROW(normalize(px, 0.0, 512.0), ValidationError);
}

TEST(SplitMerge, RoundTrip) {
  const Landmark68 lm = sample_face();
  const SplitLandmarks s = split(lm);
  EXPECT_EQ(s.upper.size(), 39u);
  EXPECT_EQ(s.lower_contour.size(), 9u);
  EXPECT_EQ(s.mouth.size(), 20u);
  EXPECT_EQ(s.lower_contour[0], lm.points[4]);
  EXPECT_EQ(s.mouth[19], lm.points[67]);
  EXPECT_EQ(s.upper[4], lm.points[13]);
  EXPECT_EQ(merge(s), lm);
}

TEST(Rasterize, MassAndCenter) {
  const Landmark68 lm = sample_face();
  const GrayImage r = rasterize(lm, 64);
  const double mass = std::accumulate(r.pixels.begin(), r.pixels.end(), 0.0);
  EXPECT_NEAR(mass, 68.0, 1e-9);
  EXPECT_EQ(r, rasterize(lm, 64));

  Landmark68 centre;
  for (auto& p : centre.points) p = {0.5, 0.5};
  const GrayImage c = rasterize(centre, 64);
  EXPECT_NEAR(c.at(32, 32), 68.0, 1e-12);
  EXPECT_NEAR(std::accumulate(c.pixels.begin(), c.pixels.end(), 0.0) - c.at(32, 32), 0.0, 1e-12);

  EXPECT_THROW(rasterize(lm, 8), ValidationError);
}

TEST(Rasterize, TranslationShiftsOneColumn) {
  const std::size_t s = 64;
  const Landmark68 lm = sample_face();
  Landmark68 shifted = lm;
  for (auto& p : shifted.points) p.x += 1.0 / static_cast<double>(s);
  const GrayImage a = rasterize(lm, s);
  const GrayImage b = rasterize(shifted, s);
  for (std::size_t y = 0; y < s; ++y) {
    EXPECT_NEAR(b.at(0, y), 0.0, 1e-12);
    for (std::size_t x = 1; x < s; ++x) EXPECT_NEAR(b.at(x, y), a.at(x - 1, y), 1e-12);
  }
}

TEST(LandmarkFile, RoundTripAndCount) {
  const fs::path dir = scratch("file");
  std::vector<LandmarkFrame> frames;
  for (long i = 0; i < 100; ++i) {
    FaceParams p;
    p.mouth = static_cast<double>(i) / 99.0;
    frames.push_back({i, landmarks_from_params(p)});
  }
  save_landmark_file(dir / "lm.txt", frames);
  const auto back = load_landmark_file(dir / "lm.txt");
  ASSERT_EQ(back.size(), 100u);
  for (std::size_t f = 0; f < back.size(); ++f) {
    EXPECT_EQ(back[f].frame, frames[f].frame);
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
      EXPECT_NEAR(back[f].landmarks.points[i].x, frames[f].landmarks.points[i].x, 5e-10);
      EXPECT_NEAR(back[f].landmarks.points[i].y, frames[f].landmarks.points[i].y, 5e-10);
    }
  }
  // saving what was loaded reproduces the same bytes
  save_landmark_file(dir / "lm2.txt", back);
  std::ifstream a(dir / "lm.txt"), b(dir / "lm2.txt");
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
}

TEST(LandmarkFile, ShortLineNamesLine) {
  const fs::path dir = scratch("bad");
  {
    std::ofstream os(dir / "bad.txt");
    os << "# comment\n0";
    for (int i = 0; i < 136; ++i) os << " 0.5";
    os << "\n1";
    for (int i = 0; i < 134; ++i) os << " 0.5";
    os << "\n";
  }
  try {
    load_landmark_file(dir / "bad.txt");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("67"), std::string::npos) << e.what();
  }
}
