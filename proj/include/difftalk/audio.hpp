#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "difftalk/layers.hpp"
#include "difftalk/param_store.hpp"

namespace difftalk {

inline constexpr std::size_t kAudioFeatureDim = 29;
inline constexpr std::size_t kAudioWindowFrames = 16;
inline constexpr std::size_t kAudioEmbeddingDim = 64;

using AudioFrame = std::array<double, kAudioFeatureDim>;

struct AudioTrack {
  std::vector<AudioFrame> frames;
  double frame_rate = 25.0;

  std::size_t size() const { return frames.size(); }
};

/// 16 x 29 block, row r holds frame (center - 8 + r) with edge clamping.
struct AudioWindow {
  std::array<double, kAudioWindowFrames * kAudioFeatureDim> block{};

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(block).subspan(r * kAudioFeatureDim, kAudioFeatureDim);
  }
  bool operator==(const AudioWindow&) const = default;
};

using AudioEmbedding = std::array<double, kAudioEmbeddingDim>;

AudioWindow window(const AudioTrack& track, std::size_t frame_idx);
/// Row r samples time frame_idx + speed * (r - 8), linearly interpolated and clamped to the track.
/// speed 1 reproduces window() exactly; speed 0 repeats the centre frame.
AudioWindow resampled_window(const AudioTrack& track, std::size_t frame_idx, double speed);

/// Fixed 29 x 4 linear code mapping mouth features to audio features.
struct AudioCode {
  std::array<double, kAudioFeatureDim * 4> matrix{};  // row-major [29][4]
};

AudioCode make_audio_code(std::uint64_t seed);
/// phi(m) = [m, m^2, sin(pi m), cos(pi m)]
std::array<double, 4> mouth_basis(double m);
AudioFrame encode_mouth(const AudioCode& code, double m);

/// frame_i = P phi(m_i) + sigma * eta_i. P and eta come from the same seeded stream
/// (P first), so the code is recoverable with make_audio_code(seed).
AudioTrack synth_track(std::span<const double> mouth_signal, std::uint64_t seed,
                       double noise_sigma = 0.01, double frame_rate = 25.0);

/// "# rate=<fps>" header, then "frame_index f0 ... f28" per line.
void save_audio_file(const std::filesystem::path& file, const AudioTrack& track);
AudioTrack load_audio_file(const std::filesystem::path& file);

/// Packs windows into a [B, 16, 29] tensor.
Tensor windows_to_tensor(std::span<const AudioWindow> windows);

/// Temporal convolution stack over the 16-frame axis: three conv1d layers
/// (kernel 3, stride 2, leaky ReLU) then a linear map to the 64-dim embedding.
class TemporalEncoder {
 public:
  TemporalEncoder() = default;
  TemporalEncoder(ParamStore& store, const std::string& prefix, Rng& rng);

  /// [B, 16, 29] -> [B, 64]
  Tensor forward(const Tensor& windows) const;
  AudioEmbedding encode(const AudioWindow& win) const;

  const Tensor& conv_weight(std::size_t layer) const { return conv_w_[layer]; }

 private:
  std::array<Tensor, 3> conv_w_, conv_b_;
  nn::Linear out_;
};

}  // namespace difftalk
