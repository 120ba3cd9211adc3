#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "difftalk/audio.hpp"
#include "difftalk/dataset.hpp"
#include "difftalk/landmarks.hpp"
#include "difftalk/layers.hpp"
#include "difftalk/param_store.hpp"

namespace difftalk {

struct CompletionConfig {
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t ffn_hidden = 128;
  std::size_t heads = 1;
  std::size_t audio_tokens = 4;  // the audio embedding is unfolded into this many context tokens
  double offset_bound = 0.15;
  double coord_scale = 4.0;  // coordinates are fed relative to the upper-point centroid, times this
  /// Ablation: audio tokens join the BM-Trans context, the mouth is predicted directly and
  /// AM-Trans is absent.
  bool ablate_am = false;
};

/// LF-Trans, BM-Trans, AM-Trans and the audio temporal encoder, all under `completion.*`.
class CompletionModel {
 public:
  struct Output {
    Tensor lower;       // [B, 9, 2]  absolute coordinates
    Tensor base_mouth;  // [B, 20, 2]
    Tensor offsets;     // [B, 20, 2], zero in ablation mode
    Tensor mouth;       // base_mouth + offsets
    Tensor predicted;   // [B, 29, 2] = lower ++ mouth (point set R)
  };

  explicit CompletionModel(const CompletionConfig& config = {}, std::uint64_t seed = 0);
  CompletionModel(const CompletionModel&) = delete;
  CompletionModel& operator=(const CompletionModel&) = delete;

  const CompletionConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const TemporalEncoder& audio_encoder() const { return audio_; }

  /// Batched forward. upper [B, 39, 2] absolute, windows [B, 16, 29].
  Output forward(const Tensor& upper, const Tensor& windows) const;

  /// Per-stage entry points on a single frame, absolute coordinates.
  std::vector<Point> lf_forward(std::span<const Point> upper) const;
  /// `contour` is the 39 upper points followed by the 9 lower contour points.
  std::vector<Point> bm_forward(std::span<const Point> contour) const;
  /// Offsets for each base mouth point; needs the upper points for the coordinate frame.
  std::vector<Point> am_forward(std::span<const Point> upper, const AudioEmbedding& audio,
                                std::span<const Point> base_mouth) const;

  AudioEmbedding embed(const AudioWindow& win) const { return audio_.encode(win); }

  Landmark68 complete(std::span<const Point> upper, const AudioWindow& win) const;
  Landmark68 complete(std::span<const Point> upper, const AudioEmbedding& audio) const;

  /// Completes many frames in one batched pass.
  std::vector<Landmark68> complete_batch(const std::vector<std::vector<Point>>& uppers,
                                         std::span<const AudioWindow> windows) const;

 private:
  struct Stack {
    std::vector<nn::AttentionBlock> self_attn;
    std::vector<nn::FeedForward> self_ffn;
    std::vector<nn::AttentionBlock> cross_attn;
    std::vector<nn::FeedForward> cross_ffn;
  };

  Stack make_stack(const std::string& prefix, std::size_t self_layers, std::size_t cross_layers,
                   Rng& rng);
  Tensor run_stack(const Stack& s, Tensor tokens, Tensor queries, const Tensor* extra_ctx) const;
  Tensor embed_points(const nn::Mlp& mlp, const Tensor& pos, const Tensor& coords) const;
  Tensor audio_context(const Tensor& embedding) const;
  Tensor lf_core(const Tensor& upper_n) const;
  Tensor bm_core(const Tensor& contour_n, const Tensor* audio_ctx) const;
  Tensor am_core(const Tensor& audio_ctx, const Tensor& base_n) const;

  CompletionConfig config_;
  ParamStore store_;
  TemporalEncoder audio_;
  nn::Linear audio_proj_;
  nn::Mlp lf_in_, lf_out_, bm_in_, bm_out_, am_in_, am_out_;
  Tensor lf_pos_, lf_queries_, bm_pos_, bm_queries_, am_pos_;
  Stack lf_, bm_, am_;
};

/// (1/N) sum over R of squared point error, N = |R| = 29.
double completion_loss(const Landmark68& pred, const Landmark68& gt,
                       const RegionPartition& part = RegionPartition::standard());

/// Mean Euclidean distance over R.
double region_distance(const Landmark68& pred, const Landmark68& gt,
                       const RegionPartition& part = RegionPartition::standard());

struct CompletionTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 5e-4;
  bool cosine_decay = true;  // per-step cosine anneal of lr towards zero
  double tempo_jitter = 1.0;  // training windows resampled at speed U(1 - j, 1 + j); 0 disables
  std::uint64_t seed = 0;
  std::size_t train_begin = 0;
  std::size_t train_end = 1000;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct CompletionTrainResult {
  std::vector<double> epoch_loss;
};

/// Inputs for frame i: upper points of frame i and the audio window centred on i.
struct CompletionBatch {
  std::vector<std::vector<Point>> uppers;
  std::vector<AudioWindow> windows;
  std::vector<Landmark68> targets;
};
CompletionBatch completion_inputs(const Dataset& ds, std::span<const std::size_t> frames);

CompletionTrainResult train_completion(CompletionModel& model, const Dataset& ds,
                                       const CompletionTrainConfig& config);

/// Mean over frames of region_distance between complete() and the ground truth.
double heldout_distance(const CompletionModel& model, const Dataset& ds, std::size_t begin,
                        std::size_t end);

}  // namespace difftalk
