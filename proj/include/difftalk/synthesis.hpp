#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "difftalk/dataset.hpp"
#include "difftalk/diffusion.hpp"
#include "difftalk/image.hpp"
#include "difftalk/landmarks.hpp"
#include "difftalk/layers.hpp"
#include "difftalk/param_store.hpp"

namespace difftalk {

/// Pre-norm residual conv block; the time projection is optional.
struct ResBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2, skip;
  nn::Linear time_proj;
  bool has_skip = false;
  bool has_time = false;

  ResBlock() = default;
  ResBlock(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
           std::size_t groups, std::size_t time_dim, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& temb) const;
};

/// Gray images in [0, 255] <-> [B, 1, s, s] tensors in [0, 1].
Tensor images_to_tensor(std::span<const GrayImage> images);
GrayImage tensor_to_image(const Tensor& t, std::size_t batch = 0);

/// Fully convolutional, 8x downsampling: [B, 1, s, s] -> [B, 4, s/8, s/8].
class ToyAutoencoder {
 public:
  ToyAutoencoder() = default;
  ToyAutoencoder(ParamStore& store, const std::string& prefix, std::size_t latent_channels, Rng& rng);

  /// Latents divided by the stored latent scale.
  Tensor encode(const Tensor& images) const;
  Tensor decode(const Tensor& latents) const;
  double latent_scale() const { return scale_[0]; }
  void set_latent_scale(double s);

 private:
  std::vector<nn::Conv2d> enc_, dec_;
  Tensor scale_;
};

struct UNetConfig {
  std::size_t latent_channels = 4;
  std::size_t c1 = 32;  // channels at full latent resolution
  std::size_t c2 = 64;  // channels at half resolution
  std::size_t time_dim = 64;
  std::size_t ctx_dim = 64;
  std::size_t groups = 8;
  std::size_t heads = 1;
};

/// Decoder hook: site 0 is the half-resolution up block, site 1 the full-resolution one.
using DecoderHook = std::function<Tensor(std::size_t site, const Tensor& h)>;

/// Noise predictor Unet(Z_t, t, y) with cross-attention over conditioning tokens.
class CondUNet {
 public:
  CondUNet() = default;
  CondUNet(ParamStore& store, const std::string& prefix, const UNetConfig& config, Rng& rng);

  /// z_t [B, C, h, w], one step index per batch item, tokens [B, N, ctx_dim].
  Tensor forward(const Tensor& z_t, std::span<const std::size_t> t, const Tensor& tokens,
                 const DecoderHook& hook = {}) const;
  /// The learned null token repeated over the batch: [B, 1, ctx_dim].
  Tensor null_tokens(std::size_t batch) const;
  const UNetConfig& config() const { return config_; }

 private:
  Tensor cross(const nn::AttentionBlock& attn, const Tensor& h, const Tensor& tokens) const;

  UNetConfig config_;
  nn::Mlp time_mlp_;
  nn::Conv2d conv_in_, down_, up_conv_, conv_out_;
  ResBlock rb1_, rb2_, mid_, up2_, up1_;
  nn::AttentionBlock mid_attn_, up2_attn_, up1_attn_;
  nn::GroupNorm out_norm_;
  Tensor null_;
};

/// Sinusoidal embedding of step indices: [B, dim].
Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim);

/// Landmark raster -> token sets for both decoder sites: a stride-2 conv stem down to the
/// latent resolution followed by the Unet encoder topology (without time input).
class LandmarkEncoder {
 public:
  LandmarkEncoder() = default;
  LandmarkEncoder(ParamStore& store, const std::string& prefix, const UNetConfig& config,
                  std::size_t raster_size, std::size_t latent_size, Rng& rng);

  /// raster [B, 1, s, s] -> {site 0: [B, (h/2)^2, c2], site 1: [B, h^2, c1]}
  std::array<Tensor, 2> forward(const Tensor& raster) const;

 private:
  std::vector<nn::Conv2d> stem_;
  nn::Conv2d conv_in_, down_;
  ResBlock rb1_, rb2_;
  Tensor pos1_, pos0_;
};

/// Residual cross-attention from decoder features into landmark tokens. Key, value and output
/// maps are bias-free and the output map starts at zero, so zero tokens leave h unchanged.
struct FusionAttention {
  nn::LayerNorm norm;
  nn::Linear wq, wk, wv, wo;
  Tensor query_pos;
  std::size_t heads = 1;

  FusionAttention() = default;
  FusionAttention(ParamStore& store, const std::string& prefix, std::size_t channels,
                  std::size_t positions, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& h, const Tensor& tokens) const;
};

struct SynthesisConfig {
  UNetConfig unet;
  std::size_t image_size = 64;
  std::size_t fusion_heads = 2;
  std::size_t diffusion_steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.2;
};

struct StageConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t train_begin = 0, train_end = 1000;
  std::size_t val_begin = 1000, val_end = 1200;
  std::size_t val_limit = 64;  // validation frames taken from the start of the val range
  std::function<void(std::size_t epoch, double train_loss, double val_loss)> on_epoch;
};

struct StageResult {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

struct GeneratedFace {
  GrayImage image;  // composited, 8-bit grid
  Tensor latent;    // sampled z_0 before decoding, [1, C, h, w]
  Tensor z0_upper;  // encoding of the upper-half-only image
};

/// Autoencoder, frozen base Unet and the trainable landmark branch, all under `synth.*`.
class FaceSynthesizer {
 public:
  explicit FaceSynthesizer(const SynthesisConfig& config = {}, std::uint64_t seed = 0);
  FaceSynthesizer(const FaceSynthesizer&) = delete;
  FaceSynthesizer& operator=(const FaceSynthesizer&) = delete;

  const SynthesisConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ToyAutoencoder& autoencoder() const { return ae_; }
  const CondUNet& base() const { return base_; }
  const LandmarkEncoder& landmark_encoder() const { return lmenc_; }
  std::size_t latent_size() const { return config_.image_size / 8; }

  /// Reconstruction training; sets the latent scale and freezes `synth.ae`. Losses are MSE
  /// on [0, 1] intensities.
  StageResult pretrain_autoencoder(const Dataset& ds, const StageConfig& config);
  /// Full-grid denoising with the null token; freezes `synth.base`.
  StageResult pretrain_base(const Dataset& ds, const StageConfig& config);
  /// Partial noising and lower-region loss; updates only `synth.lmenc`. `landmarks` supplies
  /// the conditioning landmarks per frame (ground truth or completed).
  StageResult train_synthesis(const Dataset& ds, std::span<const Landmark68> landmarks,
                              const StageConfig& config);

  Tensor encode(std::span<const GrayImage> images) const;
  Tensor landmark_raster(std::span<const Landmark68> lms) const;
  std::array<Tensor, 2> landmark_tokens(std::span<const Landmark68> lms) const;

  Tensor base_eps(const Tensor& z_t, std::span<const std::size_t> t) const;
  Tensor dual_eps(const Tensor& z_t, std::span<const std::size_t> t,
                  const std::array<Tensor, 2>& tokens) const;

  /// Mean held-out reconstruction MSE on [0, 1] intensities.
  double reconstruction_mse(const Dataset& ds, std::size_t begin, std::size_t end) const;

  /// `image` supplies the upper half; the lower half is generated from `lm`.
  GeneratedFace generate_face(const GrayImage& image, const Landmark68& lm, std::uint64_t seed) const;

 private:
  SynthesisConfig config_;
  NoiseSchedule schedule_;
  ParamStore store_;
  ToyAutoencoder ae_;
  CondUNet base_;
  LandmarkEncoder lmenc_;
  std::array<FusionAttention, 2> fusion_;
};

}  // namespace difftalk
