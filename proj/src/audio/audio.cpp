#include "difftalk/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

constexpr std::array<std::size_t, 4> kConvChannels = {kAudioFeatureDim, 32, 32, 64};
constexpr std::size_t kEncodedLength = kAudioWindowFrames / 8;

}  // namespace

AudioWindow window(const AudioTrack& track, std::size_t frame_idx) {
  if (frame_idx >= track.size()) {
    throw std::out_of_range("audio frame " + std::to_string(frame_idx) + " outside track of " +
                            std::to_string(track.size()) + " frames");
  }
  AudioWindow w;
  const long last = static_cast<long>(track.size()) - 1;
  for (std::size_t r = 0; r < kAudioWindowFrames; ++r) {
    const long src = std::clamp(static_cast<long>(frame_idx) - 8 + static_cast<long>(r), 0L, last);
    std::copy(track.frames[static_cast<std::size_t>(src)].begin(),
              track.frames[static_cast<std::size_t>(src)].end(),
              w.block.begin() + static_cast<long>(r * kAudioFeatureDim));
  }
  return w;
}

AudioWindow resampled_window(const AudioTrack& track, std::size_t frame_idx, double speed) {
  if (frame_idx >= track.size()) {
    throw std::out_of_range("audio frame " + std::to_string(frame_idx) + " outside track of " +
                            std::to_string(track.size()) + " frames");
  }
  if (!std::isfinite(speed) || speed < 0.0) throw ValidationError("resample speed must be finite and >= 0");
  AudioWindow w;
  const double last = static_cast<double>(track.size() - 1);
  for (std::size_t r = 0; r < kAudioWindowFrames; ++r) {
    const double t = std::clamp(static_cast<double>(frame_idx) + speed * (static_cast<double>(r) - 8.0), 0.0, last);
    const auto i0 = static_cast<std::size_t>(std::floor(t));
    const std::size_t i1 = std::min(i0 + 1, track.size() - 1);
    const double frac = t - static_cast<double>(i0);
    const auto& a = track.frames[i0];
    const auto& b = track.frames[i1];
    for (std::size_t c = 0; c < kAudioFeatureDim; ++c) {
      w.block[r * kAudioFeatureDim + c] = frac == 0.0 ? a[c] : a[c] + frac * (b[c] - a[c]);
    }
  }
  return w;
}

AudioCode make_audio_code(std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  AudioCode code;
  for (auto& v : code.matrix) v = normal(rng);
  return code;
}

std::array<double, 4> mouth_basis(double m) {
  return {m, m * m, std::sin(std::numbers::pi * m), std::cos(std::numbers::pi * m)};
}

AudioFrame encode_mouth(const AudioCode& code, double m) {
  const auto phi = mouth_basis(m);
  AudioFrame f{};
  for (std::size_t i = 0; i < kAudioFeatureDim; ++i) {
    for (std::size_t j = 0; j < 4; ++j) f[i] += code.matrix[i * 4 + j] * phi[j];
  }
  return f;
}

AudioTrack synth_track(std::span<const double> mouth_signal, std::uint64_t seed,
                       double noise_sigma, double frame_rate) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  AudioCode code;
  for (auto& v : code.matrix) v = normal(rng);
  AudioTrack track;
  track.frame_rate = frame_rate;
  track.frames.reserve(mouth_signal.size());
  for (double m : mouth_signal) {
    AudioFrame f = encode_mouth(code, m);
    for (auto& v : f) v += noise_sigma * normal(rng);
    track.frames.push_back(f);
  }
  return track;
}

void save_audio_file(const std::filesystem::path& file, const AudioTrack& track) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write audio file: " + file.string());
  char buf[40];
  std::snprintf(buf, sizeof buf, "# rate=%.17g\n", track.frame_rate);
  os << buf;
  for (std::size_t i = 0; i < track.size(); ++i) {
    os << i;
    for (double v : track.frames[i]) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + file.string());
}

AudioTrack load_audio_file(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ValidationError("cannot open audio file: " + file.string());
  AudioTrack track;
  bool have_rate = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') {
      const auto pos = line.find("rate=");
      if (pos != std::string::npos) {
        try {
          track.frame_rate = std::stod(line.substr(pos + 5));
        } catch (const std::exception&) {
          throw ParseError(file.string(), line_no, "bad rate header");
        }
        have_rate = true;
      }
      continue;
    }
    std::istringstream ls(line);
    long index = 0;
    if (!(ls >> index)) throw ParseError(file.string(), line_no, "missing frame index");
    if (index != static_cast<long>(track.size())) {
      throw ParseError(file.string(), line_no, "frame index " + std::to_string(index) +
                                                   " out of sequence");
    }
    AudioFrame f{};
    std::size_t n = 0;
    double v;
    while (ls >> v) {
      if (n < kAudioFeatureDim) f[n] = v;
      ++n;
    }
    if (!ls.eof()) throw ParseError(file.string(), line_no, "non-numeric token");
    if (n != kAudioFeatureDim) {
      throw ParseError(file.string(), line_no, "expected 29 features, found " + std::to_string(n));
    }
    track.frames.push_back(f);
  }
  if (!have_rate) throw ParseError(file.string(), 1, "missing '# rate=<fps>' header");
  return track;
}

Tensor windows_to_tensor(std::span<const AudioWindow> windows) {
  std::vector<double> values;
  values.reserve(windows.size() * kAudioWindowFrames * kAudioFeatureDim);
  for (const auto& w : windows) values.insert(values.end(), w.block.begin(), w.block.end());
  return Tensor::from_data({windows.size(), kAudioWindowFrames, kAudioFeatureDim}, std::move(values));
}

TemporalEncoder::TemporalEncoder(ParamStore& store, const std::string& prefix, Rng& rng) {
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t in = kConvChannels[l], out = kConvChannels[l + 1];
    const std::string p = prefix + ".conv" + std::to_string(l);
    conv_w_[l] = store.add(p + ".weight",
                           Tensor::randn({out, in, 3}, rng, 1.0 / std::sqrt(3.0 * static_cast<double>(in))));
    conv_b_[l] = store.add(p + ".bias", Tensor::zeros({out}));
  }
  out_ = nn::Linear(store, prefix + ".out", kConvChannels[3] * kEncodedLength, kAudioEmbeddingDim, rng);
}

Tensor TemporalEncoder::forward(const Tensor& windows) const {
  if (windows.ndim() != 3 || windows.dim(1) != kAudioWindowFrames || windows.dim(2) != kAudioFeatureDim) {
    throw DimensionError("temporal encoder expects [B, 16, 29], got " + shape_str(windows.shape()));
  }
  Tensor h = ops::swap_last2(windows);  // channels = feature dim, length = time
  for (std::size_t l = 0; l < 3; ++l) {
    h = ops::leaky_relu(ops::conv1d(h, conv_w_[l], conv_b_[l], 2, 1), 0.2);
  }
  h = ops::reshape(h, {h.dim(0), kConvChannels[3] * kEncodedLength});
  return out_(h);
}

AudioEmbedding TemporalEncoder::encode(const AudioWindow& win) const {
  NoGradGuard no_grad;
  const Tensor e = forward(windows_to_tensor(std::span<const AudioWindow>(&win, 1)));
  AudioEmbedding out;
  std::copy(e.data().begin(), e.data().end(), out.begin());
  return out;
}

}  // namespace difftalk
