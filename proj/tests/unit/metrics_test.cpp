#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "difftalk/dataset.hpp"
#include "difftalk/errors.hpp"
#include "difftalk/metrics.hpp"

using namespace difftalk;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("difftalk_metrics_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GrayImage checkerboard(std::size_t n, bool invert) {
  GrayImage img(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) img.at(x, y) = ((x + y + invert) % 2) ? 255.0 : 0.0;
  return img;
}

}  // namespace

TEST(LandmarkDistance, SinglePointOffset) {
  const Landmark68 gt = landmarks_from_params(FaceParams{});
  Landmark68 p = gt;
  p.points[60].x += 0.3;
  p.points[60].y -= 0.4;
  EXPECT_NEAR(landmark_distance(p, gt), 0.5 / 29.0, 1e-15);
  EXPECT_NEAR(landmark_distance(p, gt), 0.017241379310, 1e-11);
  Landmark68 q = gt;
  q.points[30].x += 1.0;
  EXPECT_EQ(landmark_distance(q, gt), 0.0);
  const std::vector<std::size_t> sub = {30, 31};
  EXPECT_NEAR(landmark_distance(q, gt, sub), 0.5, 1e-15);
  const std::vector<std::size_t> bad = {68};
  EXPECT_THROW(landmark_distance(q, gt, bad), ValidationError);
}

TEST(Psnr, HandValues) {
  GrayImage a(64, 64, 100.0), b(64, 64, 101.0);
  // MSE 1 -> 10 log10(255^2)
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(255.0 * 255.0), 1e-12);
  EXPECT_NEAR(psnr(a, b), 48.1308036, 1e-6);
  EXPECT_TRUE(is_psnr_identical(psnr(a, a)));
  GrayImage c(64, 64, 100.0);
  c.pixels[0] = 110.0;  // MSE 100 / 4096
  EXPECT_NEAR(psnr(a, c), 10.0 * std::log10(255.0 * 255.0 * 4096.0 / 100.0), 1e-12);
  EXPECT_THROW(psnr(a, GrayImage(32, 64)), ValidationError);
}

TEST(Ssim, IdentityAndSymmetry) {
  const Dataset ds = generate_dataset(3, 5, 64);
  EXPECT_NEAR(ssim(ds.images[0], ds.images[0]), 1.0, 1e-12);
  EXPECT_NEAR(ssim(ds.images[0], ds.images[2]), ssim(ds.images[2], ds.images[0]), 1e-14);
  EXPECT_LT(ssim(ds.images[0], ds.images[2]), 1.0);
}

TEST(Ssim, ConstantImagesHandEvaluated) {
  // zero variance: SSIM = (2 m_a m_b + c1) / (m_a^2 + m_b^2 + c1)
  const double c1 = (0.01 * 255) * (0.01 * 255);
  const double expected = (2 * 100.0 * 110.0 + c1) / (100.0 * 100.0 + 110.0 * 110.0 + c1);
  EXPECT_NEAR(ssim(GrayImage(20, 16, 100.0), GrayImage(20, 16, 110.0)), expected, 1e-12);
}

TEST(Ssim, InvertedCheckerboardIsNegative) {
  const double s = ssim(checkerboard(32, false), checkerboard(32, true));
  EXPECT_LT(s, 0.0);
  EXPECT_LT(s, 0.1);
  EXPECT_THROW(ssim(GrayImage(10, 10), GrayImage(10, 10)), ValidationError);
}

TEST(Evaluate, GroundTruthAgainstItself) {
  const fs::path gt = scratch_dir("gt");
  const Dataset ds = generate_dataset(4, 9, 64);
  write_dataset(ds, gt);
  auto report = evaluate(gt, gt);
  ASSERT_EQ(report.frames.size(), 4u);
  for (const auto& f : report.frames) {
    EXPECT_EQ(f.ld, 0.0);
    EXPECT_TRUE(is_psnr_identical(f.psnr));
    EXPECT_NEAR(f.ssim, 1.0, 1e-12);
  }
  EXPECT_EQ(report.mean_ld, 0.0);
  EXPECT_NEAR(report.mean_ssim, 1.0, 1e-12);

  report.seed = 17;
  report.config_echo = "a = 1\nb = 2";
  const fs::path out = gt / "report.txt";
  write_report(out, report);
  std::ifstream is(out);
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  EXPECT_NE(text.find("# frame LD PSNR SSIM\n0 0 inf 1\n"), std::string::npos);
  EXPECT_NE(text.find("frames 4\n"), std::string::npos);
  EXPECT_NE(text.find("mean_PSNR inf\n"), std::string::npos);
  EXPECT_NE(text.find("seed 17\n"), std::string::npos);
  EXPECT_NE(text.find("config a = 1\nconfig b = 2\n"), std::string::npos);
}

TEST(Evaluate, MeansOverFrames) {
  EvalReport r;
  r.frames = {{0, 0.01, 20.0, 0.5}, {1, 0.03, 24.0, 0.7}};
  r.recompute_means();
  EXPECT_NEAR(r.mean_ld, 0.02, 1e-15);
  EXPECT_NEAR(r.mean_psnr, 22.0, 1e-15);
  EXPECT_NEAR(r.mean_ssim, 0.6, 1e-15);
}

TEST(Evaluate, MissingGroundTruthFramesAreListed) {
  const fs::path gt = scratch_dir("gt_short");
  const fs::path run = scratch_dir("run_long");
  write_dataset(generate_dataset(3, 9, 64), gt);
  write_dataset(generate_dataset(6, 9, 64), run);
  try {
    evaluate(run, gt);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3, 4, 5"), std::string::npos) << msg;
  }
  EXPECT_THROW(evaluate(scratch_dir("empty"), gt), ValidationError);
}
