#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "difftalk/audio.hpp"
#include "difftalk/image.hpp"
#include "difftalk/landmarks.hpp"

namespace difftalk {

/// Procedural face description, all lengths in normalized canvas units.
struct FaceParams {
  double cx = 0.5, cy = 0.48;   // head centre
  double rx = 0.29, ry = 0.365;  // head radii
  double yaw = 0.0;             // lateral shift of the chin and inner features
  double eye = 0.6;             // eye openness in [0, 1]
  double mouth = 0.5;           // mouth openness m in [0, 1]
  std::uint64_t seed = 0;       // sequence seed that produced these values

  bool operator==(const FaceParams&) const = default;
};

struct ParamRange {
  double lo, hi;
};

struct FaceParamRanges {
  ParamRange cx{0.44, 0.56};
  ParamRange cy{0.44, 0.52};
  ParamRange rx{0.26, 0.32};
  ParamRange ry{0.33, 0.40};
  ParamRange yaw{-0.03, 0.03};
  ParamRange eye{0.2, 1.0};
  ParamRange mouth{0.0, 1.0};
};

inline constexpr FaceParamRanges kFaceRanges{};

/// Throws ValidationError naming the first field outside its range.
void validate(const FaceParams& p);

/// Mouth geometry constants. The inner-lip gap is exactly kInnerGapScale * m * ry.
inline constexpr double kInnerGapScale = 0.18;
inline constexpr double kMouthDrop = 0.50;       // mouth centre below head centre, in ry
inline constexpr double kMouthHalfWidth = 0.36;  // in rx
inline constexpr double kLipThickness = 0.055;   // in ry

/// Closed-form placement:
///   jaw k (0..16): x = cx - rx cos(pi k/16) + yaw sin(pi k/16), y = cy + ry sin(pi k/16)
///   brows/eyes/nose at fixed offsets scaled by (rx, ry), shifted by yaw
///   mouth centre (cx + yaw, cy + 0.5 ry); inner upper lip 61-63 at y - g/2, inner lower
///   lip 65-67 at y + g/2 with g = 0.18 m ry; outer lips a lip thickness beyond.
Landmark68 landmarks_from_params(const FaceParams& p);

/// Mean vertical distance between inner-lip pairs (61,67), (62,66), (63,65).
double inner_lip_gap(const Landmark68& lm);

/// 4x4 supersampled rendering on a flat background: head ellipse (chin follows yaw),
/// brows, eyes, nose, lips and mouth opening. Values in [0, 255], deterministic.
GrayImage render(const FaceParams& p, std::size_t size);

/// Background and fill levels of the renderer.
inline constexpr double kBackgroundLevel = 50.0;
inline constexpr double kSkinLevel = 180.0;

struct Dataset {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::vector<FaceParams> params;
  std::vector<Landmark68> landmarks;
  std::vector<GrayImage> images;
  AudioTrack audio;

  std::size_t size() const { return params.size(); }
};

/// Seed of the audio code used by generate_dataset for a given dataset seed.
std::uint64_t dataset_audio_seed(std::uint64_t seed);

/// Mean-reverting random walks for pose and eyes, m(t) = clipped sum of three random
/// low-frequency sinusoids, audio from synth_track over m.
Dataset generate_dataset(std::size_t n_frames, std::uint64_t seed, std::size_t image_size = 64,
                         double audio_noise = 0.01);

/// Writes images/%06d.pgm, landmarks.txt, audio.txt and params.txt under `dir`.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir, bool with_images = true);

/// generate_dataset + write_dataset.
Dataset gen_sequence(std::size_t n_frames, std::uint64_t seed, std::size_t image_size,
                     const std::filesystem::path& dir);

struct FitOptions {
  std::size_t max_rounds = 60;
  double min_step = 1e-4;
};

/// Analysis-by-synthesis read-back: coordinate search over FaceParams minimizing the
/// pixel error between render(p) and `img`, started from the centre of the ranges.
FaceParams fit_params(const GrayImage& img, FitOptions options = {});

}  // namespace difftalk
