#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "difftalk/image.hpp"
#include "difftalk/landmarks.hpp"

namespace difftalk {

/// Mean Euclidean distance over `subset` (defaults to the predicted set R).
double landmark_distance(const Landmark68& pred, const Landmark68& gt,
                         std::span<const std::size_t> subset = {});

/// Returned by psnr() for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();
inline bool is_psnr_identical(double v) { return v == kPsnrIdentical; }

/// 10 log10(max^2 / MSE); kPsnrIdentical when MSE == 0.
double psnr(const GrayImage& a, const GrayImage& b, double max_val = 255.0);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03, range 255,
/// averaged over all window positions fully inside the image.
double ssim(const GrayImage& a, const GrayImage& b);

struct FrameMetrics {
  long frame = 0;
  double ld = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<FrameMetrics> frames;
  double mean_ld = 0.0, mean_psnr = 0.0, mean_ssim = 0.0;
  std::uint64_t seed = 0;
  std::string config_echo;

  void recompute_means();
};

/// Compares run_dir/{images, landmarks.txt} against gt_dir for every frame present in the run.
/// Missing GT frames raise ValidationError listing their indices.
EvalReport evaluate(const std::filesystem::path& run_dir, const std::filesystem::path& gt_dir);

/// "frame LD PSNR SSIM" per line, then an aggregate block; infinite PSNR is written as `inf`.
void write_report(const std::filesystem::path& file, const EvalReport& report);

}  // namespace difftalk
