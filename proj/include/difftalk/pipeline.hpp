#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "difftalk/completion.hpp"
#include "difftalk/dataset.hpp"
#include "difftalk/errors.hpp"
#include "difftalk/metrics.hpp"
#include "difftalk/synthesis.hpp"

namespace difftalk {

/// Half-open frame interval.
struct FrameRange {
  std::size_t begin = 0, end = 0;
};

/// Parses "A..B" as [A, B).
FrameRange parse_frame_range(const std::string& text);

/// Everything a command needs. Relative paths are resolved against the config file's folder.
struct RunConfig {
  std::uint64_t seed = 0;

  std::filesystem::path data_dir = "data";
  std::filesystem::path ckpt_dir = "ckpt";
  std::filesystem::path out_dir = "out";

  std::size_t frames = 1200;
  std::size_t image_size = 64;
  double audio_noise = 0.01;
  std::size_t train_begin = 0, train_end = 1000;
  std::size_t test_begin = 1000, test_end = 1200;

  CompletionConfig completion;
  CompletionTrainConfig completion_train;

  SynthesisConfig synthesis;
  StageConfig ae_stage, base_stage, face_stage;

  FrameRange sample_frames{1000, 1050};

  /// Canonical "key = value" dump of every key, sorted.
  std::string echo() const;
};

/// "key = value" lines, '#' comments, optional "[section]" lines prefixing following keys.
/// Unknown keys and invalid values raise ValidationError naming the key.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& file);
/// Applies the defaults-only config rooted at `base_dir`.
RunConfig default_config(const std::filesystem::path& base_dir = {});
/// Recomputes fields that follow from others (stage seeds and ranges) after direct edits.
void refresh_derived(RunConfig& cfg);
/// Range checks across keys; names the offending key.
void validate(const RunConfig& cfg);

/// Writes `<dir>/manifest.<command>.txt`: command, seed, version line and the config echo.
void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg);

/// Missing stage output; the message names the command that produces it.
class StageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

std::filesystem::path completion_checkpoint(const RunConfig& cfg);
std::filesystem::path synthesis_checkpoint(const RunConfig& cfg, const std::string& stage);

Dataset cmd_gen_data(const RunConfig& cfg);

struct LandmarkTrainSummary {
  CompletionTrainResult train;
  double heldout_ld = 0.0;
  double seconds = 0.0;
};
LandmarkTrainSummary cmd_train_landmarks(const RunConfig& cfg);
/// Loads the completion checkpoint matching the config's ablation flag.
std::unique_ptr<CompletionModel> load_completion(const RunConfig& cfg);

struct FaceTrainSummary {
  StageResult ae, base, face;
  bool ae_resumed = false, base_resumed = false, face_resumed = false;
  double ae_heldout_mse = 0.0;
  std::uint64_t base_checksum_before = 0, base_checksum_after = 0;
  double seconds = 0.0;
};
FaceTrainSummary cmd_train_face(const RunConfig& cfg);
std::unique_ptr<FaceSynthesizer> load_synthesizer(const RunConfig& cfg);

/// Observer for each generated frame: frame index, source image, completed landmarks, result.
using FaceObserver = std::function<void(std::size_t frame, const GrayImage& source,
                                        const Landmark68& target, const GeneratedFace& face)>;
/// Writes out_dir/images/%06d.pgm, completed landmarks.txt and overlays/%06d.pgm. Frame f
/// is sampled with seed ^ f.
void cmd_sample(const RunConfig& cfg, const FaceObserver& observer = {});

EvalReport cmd_eval(const RunConfig& cfg);

/// Left: generated face with predicted landmarks; right: ground truth with its landmarks.
GrayImage landmark_overlay(const GrayImage& generated, const Landmark68& predicted,
                           const GrayImage& truth, const Landmark68& truth_lm);

}  // namespace difftalk
