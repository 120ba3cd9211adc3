#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "difftalk/image.hpp"

namespace difftalk {

inline constexpr std::size_t kNumLandmarks = 68;
inline constexpr std::size_t kUpperCount = 39;
inline constexpr std::size_t kLowerContourCount = 9;
inline constexpr std::size_t kMouthCount = 20;
/// Size of the predicted set R = lower contour + mouth.
inline constexpr std::size_t kPredictedCount = kLowerContourCount + kMouthCount;

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// 68 key points in the standard ordering (jaw 0-16, brows 17-26, nose 27-35,
/// eyes 36-47, mouth 48-67), coordinates normalized by image width/height.
struct Landmark68 {
  std::array<Point, kNumLandmarks> points{};

  bool in_unit_square() const;
  bool operator==(const Landmark68&) const = default;
};

/// Fixed routing of indices into network inputs and prediction targets.
///   upper_input   = {0..3} u {13..16} u {17..47}   (39 points)
///   lower_contour = {4..12}                        (9 points, chin)
///   mouth         = {48..67}                       (20 points)
struct RegionPartition {
  std::vector<std::size_t> upper_input;
  std::vector<std::size_t> lower_contour;
  std::vector<std::size_t> mouth;

  static const RegionPartition& standard();
  /// Throws std::logic_error unless the sets are disjoint and cover 0..67.
  void validate() const;
  /// lower_contour followed by mouth.
  std::vector<std::size_t> predicted() const;
};

struct SplitLandmarks {
  std::vector<Point> upper;
  std::vector<Point> lower_contour;
  std::vector<Point> mouth;
};

/// Pixel coordinates -> normalized. Throws ValidationError naming the first point
/// outside [0, width] x [0, height].
Landmark68 normalize(std::span<const Point> points_px, double width, double height);
std::array<Point, kNumLandmarks> denormalize(const Landmark68& lm, double width, double height);

SplitLandmarks split(const Landmark68& lm, const RegionPartition& part = RegionPartition::standard());
Landmark68 merge(const SplitLandmarks& parts, const RegionPartition& part = RegionPartition::standard());

/// Bilinear splat of every point onto a zero size x size canvas. Pixel (i, j) sits at
/// normalized coordinate (i / size, j / size); each in-canvas point deposits unit mass.
GrayImage rasterize(const Landmark68& lm, std::size_t size);

struct LandmarkFrame {
  long frame = 0;
  Landmark68 landmarks;
};

/// Text format: one frame per line, "frame_index x0 y0 ... x67 y67"; '#' starts a comment line.
/// Values are written with 9 decimals.
void save_landmark_file(const std::filesystem::path& file, std::span<const LandmarkFrame> frames);
std::vector<LandmarkFrame> load_landmark_file(const std::filesystem::path& file);

}  // namespace difftalk
