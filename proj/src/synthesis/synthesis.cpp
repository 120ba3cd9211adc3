#include "difftalk/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

constexpr std::size_t kChunk = 50;

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end > begin ? end - begin : 0);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

Tensor take_rows(const Tensor& all, std::span<const std::size_t> idx) {
  NoGradGuard no_grad;
  return ops::index_select(all, 0, idx);
}

std::size_t log2_exact(std::size_t v) {
  std::size_t n = 0;
  while ((std::size_t{1} << n) < v) ++n;
  if ((std::size_t{1} << n) != v) throw ValidationError("size ratio must be a power of two");
  return n;
}

void check_range(const Dataset& ds, std::size_t begin, std::size_t end, const char* what) {
  if (begin >= end || end > ds.size()) {
    throw ValidationError(std::string(what) + " range [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") invalid for a dataset of " +
                          std::to_string(ds.size()) + " frames");
  }
}

void check_stage(const StageConfig& cfg, const char* what) {
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) {
    throw ValidationError(std::string(what) + ": lr must be positive, got " + std::to_string(cfg.lr));
  }
  if (cfg.batch_size == 0) throw ValidationError(std::string(what) + ": batch_size must be positive");
}

// forward noising with one step index per batch item
Tensor noise_batch(const Tensor& z0, std::span<const std::size_t> t, const Tensor& eps,
                   const NoiseSchedule& sched) {
  const std::size_t per = z0.numel() / z0.dim(0);
  std::vector<double> zt(z0.numel());
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double ab = sched.alpha_bar_at(t[b]);
    const double a = std::sqrt(ab), sd = std::sqrt(1.0 - ab);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) zt[i] = a * z0[i] + sd * eps[i];
  }
  return Tensor::from_data(z0.shape(), std::move(zt));
}

}  // namespace

ResBlock::ResBlock(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                   std::size_t groups, std::size_t time_dim, Rng& rng)
    : norm1(store, prefix + ".norm1", in, groups),
      norm2(store, prefix + ".norm2", out, groups),
      conv1(store, prefix + ".conv1", in, out, 3, 1, rng),
      conv2(store, prefix + ".conv2", out, out, 3, 1, rng),
      has_skip(in != out),
      has_time(time_dim > 0) {
  if (has_skip) skip = nn::Conv2d(store, prefix + ".skip", in, out, 1, 1, rng);
  if (has_time) time_proj = nn::Linear(store, prefix + ".time", time_dim, out, rng);
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1(ops::silu(norm1(x)));
  if (has_time) h = ops::add_channelwise(h, time_proj(ops::silu(temb)));
  h = conv2(ops::silu(norm2(h)));
  return ops::add(has_skip ? skip(x) : x, h);
}

Tensor images_to_tensor(std::span<const GrayImage> images) {
  if (images.empty()) throw ValidationError("no images");
  const std::size_t w = images[0].width, h = images[0].height;
  std::vector<double> v;
  v.reserve(images.size() * w * h);
  for (const auto& img : images) {
    if (img.width != w || img.height != h) throw DimensionError("images differ in size");
    for (double p : img.pixels) v.push_back(p / 255.0);
  }
  return Tensor::from_data({images.size(), 1, h, w}, std::move(v));
}

GrayImage tensor_to_image(const Tensor& t, std::size_t batch) {
  if (t.ndim() != 4 || t.dim(1) != 1) throw DimensionError("expected [B, 1, h, w], got " + shape_str(t.shape()));
  const std::size_t h = t.dim(2), w = t.dim(3);
  GrayImage img(w, h);
  const auto v = t.data();
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = std::clamp(v[batch * w * h + i] * 255.0, 0.0, 255.0);
  return img;
}

ToyAutoencoder::ToyAutoencoder(ParamStore& store, const std::string& prefix,
                               std::size_t latent_channels, Rng& rng) {
  const std::string e = prefix + ".enc", d = prefix + ".dec";
  enc_.emplace_back(store, e + "0", 1, 8, 3, 1, rng);
  enc_.emplace_back(store, e + "1", 8, 16, 3, 2, rng);
  enc_.emplace_back(store, e + "2", 16, 32, 3, 2, rng);
  enc_.emplace_back(store, e + "3", 32, 32, 3, 2, rng);
  enc_.emplace_back(store, e + "4", 32, latent_channels, 1, 1, rng);
  dec_.emplace_back(store, d + "0", latent_channels, 32, 3, 1, rng);
  dec_.emplace_back(store, d + "1", 32, 32, 3, 1, rng);
  dec_.emplace_back(store, d + "2", 32, 16, 3, 1, rng);
  dec_.emplace_back(store, d + "3", 16, 8, 3, 1, rng);
  dec_.emplace_back(store, d + "4", 8, 1, 3, 1, rng);
  scale_ = store.add(prefix + ".latent_scale", Tensor::full({1}, 1.0), false);
}

Tensor ToyAutoencoder::encode(const Tensor& images) const {
  Tensor h = images;
  for (std::size_t i = 0; i + 1 < enc_.size(); ++i) h = ops::silu(enc_[i](h));
  return ops::scale(enc_.back()(h), 1.0 / latent_scale());
}

Tensor ToyAutoencoder::decode(const Tensor& latents) const {
  Tensor h = ops::silu(dec_[0](ops::scale(latents, latent_scale())));
  for (std::size_t i = 1; i + 1 < dec_.size(); ++i) h = ops::silu(dec_[i](ops::upsample2x(h)));
  return dec_.back()(h);
}

void ToyAutoencoder::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("latent scale must be positive");
  scale_.mutable_data()[0] = s;
}

Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> v(t.size() * dim, 0.0);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half));
      v[b * dim + k] = std::sin(static_cast<double>(t[b]) * f);
      v[b * dim + half + k] = std::cos(static_cast<double>(t[b]) * f);
    }
  }
  return Tensor::from_data({t.size(), dim}, std::move(v));
}

CondUNet::CondUNet(ParamStore& store, const std::string& prefix, const UNetConfig& c, Rng& rng)
    : config_(c),
      time_mlp_(store, prefix + ".time", c.time_dim, c.time_dim, c.time_dim, rng),
      conv_in_(store, prefix + ".conv_in", c.latent_channels, c.c1, 3, 1, rng),
      down_(store, prefix + ".down", c.c1, c.c2, 3, 2, rng),
      up_conv_(store, prefix + ".up", c.c2, c.c1, 3, 1, rng),
      conv_out_(store, prefix + ".conv_out", c.c1, c.latent_channels, 3, 1, rng),
      rb1_(store, prefix + ".rb1", c.c1, c.c1, c.groups, c.time_dim, rng),
      rb2_(store, prefix + ".rb2", c.c2, c.c2, c.groups, c.time_dim, rng),
      mid_(store, prefix + ".mid", c.c2, c.c2, c.groups, c.time_dim, rng),
      up2_(store, prefix + ".up2", 2 * c.c2, c.c2, c.groups, c.time_dim, rng),
      up1_(store, prefix + ".up1", 2 * c.c1, c.c1, c.groups, c.time_dim, rng),
      mid_attn_(store, prefix + ".mid_attn", c.c2, c.ctx_dim, c.heads, rng),
      up2_attn_(store, prefix + ".up2_attn", c.c2, c.ctx_dim, c.heads, rng),
      up1_attn_(store, prefix + ".up1_attn", c.c1, c.ctx_dim, c.heads, rng),
      out_norm_(store, prefix + ".out_norm", c.c1, c.groups) {
  null_ = store.add(prefix + ".null", Tensor::randn({1, c.ctx_dim}, rng, 0.5));
}

Tensor CondUNet::null_tokens(std::size_t batch) const { return ops::repeat_leading(null_, batch); }

Tensor CondUNet::cross(const nn::AttentionBlock& attn, const Tensor& h, const Tensor& tokens) const {
  return ops::from_tokens(attn.cross_attend(ops::to_tokens(h), tokens), h.dim(2), h.dim(3));
}

Tensor CondUNet::forward(const Tensor& z_t, std::span<const std::size_t> t, const Tensor& tokens,
                         const DecoderHook& hook) const {
  if (z_t.ndim() != 4 || z_t.dim(1) != config_.latent_channels || z_t.dim(2) % 2 || z_t.dim(3) % 2) {
    throw DimensionError("unet expects [B, " + std::to_string(config_.latent_channels) +
                         ", even h, even w], got " + shape_str(z_t.shape()));
  }
  if (t.size() != z_t.dim(0)) throw DimensionError("unet: one step index per batch item required");
  if (tokens.ndim() != 3 || tokens.dim(0) != z_t.dim(0) || tokens.dim(1) == 0 ||
      tokens.dim(2) != config_.ctx_dim) {
    throw DimensionError("unet: conditioning tokens must be [B, N > 0, ctx_dim], got " +
                         shape_str(tokens.shape()));
  }
  const Tensor temb = time_mlp_(timestep_embedding(t, config_.time_dim));
  const Tensor s1 = rb1_(conv_in_(z_t), temb);
  const Tensor s2 = rb2_(down_(s1), temb);
  Tensor h = cross(mid_attn_, mid_(s2, temb), tokens);
  h = cross(up2_attn_, up2_(ops::concat({h, s2}, 1), temb), tokens);
  if (hook) h = hook(0, h);
  h = up_conv_(ops::upsample2x(h));
  h = cross(up1_attn_, up1_(ops::concat({h, s1}, 1), temb), tokens);
  if (hook) h = hook(1, h);
  return conv_out_(ops::silu(out_norm_(h)));
}

LandmarkEncoder::LandmarkEncoder(ParamStore& store, const std::string& prefix, const UNetConfig& c,
                                 std::size_t raster_size, std::size_t latent_size, Rng& rng) {
  if (latent_size == 0 || raster_size % latent_size) throw ValidationError("raster size must be a multiple of the latent size");
  const std::size_t stages = log2_exact(raster_size / latent_size);
  std::size_t in = 1;
  for (std::size_t i = 0; i < stages; ++i) {
    const std::size_t out = i + 1 == stages ? c.c1 : std::min<std::size_t>(16u << i, c.c1);
    stem_.emplace_back(store, prefix + ".stem" + std::to_string(i), in, out, 3, 2, rng);
    in = out;
  }
  conv_in_ = nn::Conv2d(store, prefix + ".conv_in", c.c1, c.c1, 3, 1, rng);
  rb1_ = ResBlock(store, prefix + ".rb1", c.c1, c.c1, c.groups, 0, rng);
  down_ = nn::Conv2d(store, prefix + ".down", c.c1, c.c2, 3, 2, rng);
  rb2_ = ResBlock(store, prefix + ".rb2", c.c2, c.c2, c.groups, 0, rng);
  pos1_ = store.add(prefix + ".pos1", Tensor::randn({latent_size * latent_size, c.c1}, rng, 0.1));
  pos0_ = store.add(prefix + ".pos0",
                    Tensor::randn({latent_size * latent_size / 4, c.c2}, rng, 0.1));
}

std::array<Tensor, 2> LandmarkEncoder::forward(const Tensor& raster) const {
  Tensor h = raster;
  for (const auto& conv : stem_) h = ops::silu(conv(h));
  const Tensor f1 = rb1_(conv_in_(h), Tensor());
  const Tensor f0 = rb2_(down_(f1), Tensor());
  return {ops::add(ops::to_tokens(f0), pos0_), ops::add(ops::to_tokens(f1), pos1_)};
}

FusionAttention::FusionAttention(ParamStore& store, const std::string& prefix, std::size_t channels,
                                 std::size_t positions, std::size_t h, Rng& rng)
    : norm(store, prefix + ".norm", channels),
      wq(store, prefix + ".wq", channels, channels, rng, false),
      wk(store, prefix + ".wk", channels, channels, rng, false),
      wv(store, prefix + ".wv", channels, channels, rng, false),
      wo(store, prefix + ".wo", channels, channels, rng, false, nn::Init::kZero),
      heads(h) {
  query_pos = store.add(prefix + ".query_pos", Tensor::randn({positions, channels}, rng, 0.1));
}

Tensor FusionAttention::operator()(const Tensor& h, const Tensor& tokens) const {
  const Tensor x = ops::to_tokens(h);
  const Tensor q = wq(ops::add(norm(x), query_pos));
  const Tensor out = ops::add(x, wo(ops::attention(q, wk(tokens), wv(tokens), heads)));
  return ops::from_tokens(out, h.dim(2), h.dim(3));
}

FaceSynthesizer::FaceSynthesizer(const SynthesisConfig& config, std::uint64_t seed)
    : config_(config),
      schedule_(make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)) {
  if (config_.image_size < 16 || config_.image_size % 16) {
    throw ValidationError("image size must be a positive multiple of 16");
  }
  Rng rng(seed);
  const std::size_t h = latent_size();
  ae_ = ToyAutoencoder(store_, "synth.ae", config_.unet.latent_channels, rng);
  base_ = CondUNet(store_, "synth.base", config_.unet, rng);
  lmenc_ = LandmarkEncoder(store_, "synth.lmenc", config_.unet, config_.image_size, h, rng);
  fusion_[0] = FusionAttention(store_, "synth.lmenc.fusion0", config_.unet.c2, h * h / 4,
                               config_.fusion_heads, rng);
  fusion_[1] = FusionAttention(store_, "synth.lmenc.fusion1", config_.unet.c1, h * h,
                               config_.fusion_heads, rng);
}

Tensor FaceSynthesizer::encode(std::span<const GrayImage> images) const {
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < images.size(); s += kChunk) {
    const auto chunk = images.subspan(s, std::min(kChunk, images.size() - s));
    parts.push_back(ae_.encode(images_to_tensor(chunk)));
  }
  return parts.size() == 1 ? parts[0] : ops::concat(parts, 0);
}

Tensor FaceSynthesizer::landmark_raster(std::span<const Landmark68> lms) const {
  std::vector<GrayImage> r;
  r.reserve(lms.size());
  for (const auto& lm : lms) r.push_back(rasterize(lm, config_.image_size));
  std::vector<double> v;
  v.reserve(lms.size() * config_.image_size * config_.image_size);
  for (const auto& img : r) v.insert(v.end(), img.pixels.begin(), img.pixels.end());
  return Tensor::from_data({lms.size(), 1, config_.image_size, config_.image_size}, std::move(v));
}

std::array<Tensor, 2> FaceSynthesizer::landmark_tokens(std::span<const Landmark68> lms) const {
  return lmenc_.forward(landmark_raster(lms));
}

Tensor FaceSynthesizer::base_eps(const Tensor& z_t, std::span<const std::size_t> t) const {
  return base_.forward(z_t, t, base_.null_tokens(z_t.dim(0)));
}

Tensor FaceSynthesizer::dual_eps(const Tensor& z_t, std::span<const std::size_t> t,
                                 const std::array<Tensor, 2>& tokens) const {
  const DecoderHook hook = [&](std::size_t site, const Tensor& h) { return fusion_[site](h, tokens[site]); };
  return base_.forward(z_t, t, base_.null_tokens(z_t.dim(0)), hook);
}

StageResult FaceSynthesizer::pretrain_autoencoder(const Dataset& ds, const StageConfig& cfg) {
  check_stage(cfg, "autoencoder training");
  check_range(ds, cfg.train_begin, cfg.train_end, "autoencoder training");
  check_range(ds, cfg.val_begin, cfg.val_end, "autoencoder validation");
  if (ds.images.size() != ds.size()) throw ValidationError("autoencoder training needs images");
  store_.set_trainable("synth.ae", true);
  store_.set_trainable("synth.ae.latent_scale", false);
  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam adam(ac);
  auto order = iota_range(cfg.train_begin, cfg.train_end);
  const std::size_t val_end = std::min(cfg.val_end, cfg.val_begin + cfg.val_limit);
  StageResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<GrayImage> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) batch.push_back(ds.images[order[i]]);
      const Tensor x = images_to_tensor(batch);
      Tensor loss = ops::mse(ae_.decode(ae_.encode(x)), x);
      store_.zero_grad();
      loss.backward();
      adam.step(store_, "synth.ae");
      total += loss.item() * static_cast<double>(batch.size());
    }
    result.train_loss.push_back(total / static_cast<double>(order.size()));
    result.val_loss.push_back(reconstruction_mse(ds, cfg.val_begin, val_end));
    if (!std::isfinite(result.train_loss.back())) throw std::runtime_error("autoencoder training diverged");
    if (cfg.on_epoch) cfg.on_epoch(epoch, result.train_loss.back(), result.val_loss.back());
  }
  // unit-variance latents for the diffusion stages
  {
    NoGradGuard no_grad;
    std::vector<GrayImage> imgs(ds.images.begin() + static_cast<long>(cfg.train_begin),
                                ds.images.begin() + static_cast<long>(cfg.train_end));
    const double old = ae_.latent_scale();
    const Tensor z = encode(imgs);
    double sum = 0.0, sq = 0.0;
    for (double v : z.data()) {
      sum += v * old;
      sq += v * old * v * old;
    }
    const double n = static_cast<double>(z.numel());
    const double mean = sum / n;
    ae_.set_latent_scale(std::sqrt(std::max(sq / n - mean * mean, 1e-12)));
  }
  store_.set_trainable("synth.ae", false);
  return result;
}

double FaceSynthesizer::reconstruction_mse(const Dataset& ds, std::size_t begin, std::size_t end) const {
  check_range(ds, begin, end, "reconstruction");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t s = begin; s < end; s += kChunk) {
    const std::size_t e = std::min(end, s + kChunk);
    const Tensor x = images_to_tensor(std::span<const GrayImage>(ds.images).subspan(s, e - s));
    total += ops::mse(ae_.decode(ae_.encode(x)), x).item() * static_cast<double>(e - s);
  }
  return total / static_cast<double>(end - begin);
}

StageResult FaceSynthesizer::pretrain_base(const Dataset& ds, const StageConfig& cfg) {
  check_stage(cfg, "base training");
  check_range(ds, cfg.train_begin, cfg.train_end, "base training");
  check_range(ds, cfg.val_begin, cfg.val_end, "base validation");
  store_.set_trainable("synth.base", true);
  const std::size_t T = schedule_.T;
  const auto images = std::span<const GrayImage>(ds.images);
  const Tensor train_z = encode(images.subspan(cfg.train_begin, cfg.train_end - cfg.train_begin));
  const std::size_t val_end = std::min(cfg.val_end, cfg.val_begin + cfg.val_limit);
  const Tensor val_z = encode(images.subspan(cfg.val_begin, val_end - cfg.val_begin));

  // fixed validation noise and steps
  Rng val_rng(cfg.seed ^ 0x5A5A5A5Aull);
  const Tensor val_eps = Tensor::randn(val_z.shape(), val_rng);
  std::vector<std::size_t> val_t(val_z.dim(0));
  for (auto& t : val_t) t = std::uniform_int_distribution<std::size_t>(1, T)(val_rng);
  const Tensor val_zt = noise_batch(val_z, val_t, val_eps, schedule_);
  const auto val_loss = [&] {
    NoGradGuard no_grad;
    return ops::mse(base_eps(val_zt, val_t), val_eps).item();
  };

  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam adam(ac);
  auto order = iota_range(0, train_z.dim(0));
  StageResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      const Tensor z0 = take_rows(train_z, idx);
      const Tensor eps = Tensor::randn(z0.shape(), rng);
      std::vector<std::size_t> t(idx.size());
      for (auto& v : t) v = std::uniform_int_distribution<std::size_t>(1, T)(rng);
      Tensor loss = ops::mse(base_eps(noise_batch(z0, t, eps, schedule_), t), eps);
      store_.zero_grad();
      loss.backward();
      adam.step(store_, "synth.base");
      total += loss.item() * static_cast<double>(idx.size());
    }
    result.train_loss.push_back(total / static_cast<double>(order.size()));
    result.val_loss.push_back(val_loss());
    if (!std::isfinite(result.train_loss.back())) throw std::runtime_error("base training diverged");
    if (cfg.on_epoch) cfg.on_epoch(epoch, result.train_loss.back(), result.val_loss.back());
  }
  store_.set_trainable("synth.base", false);
  return result;
}

StageResult FaceSynthesizer::train_synthesis(const Dataset& ds, std::span<const Landmark68> landmarks,
                                             const StageConfig& cfg) {
  check_stage(cfg, "synthesis training");
  check_range(ds, cfg.train_begin, cfg.train_end, "synthesis training");
  check_range(ds, cfg.val_begin, cfg.val_end, "synthesis validation");
  if (landmarks.size() != ds.size()) throw ValidationError("one conditioning landmark set per frame required");
  store_.set_trainable("synth.base", false);
  store_.set_trainable("synth.ae", false);
  store_.set_trainable("synth.lmenc", true);
  const std::uint64_t frozen = store_.checksum("synth.base");
  const std::size_t T = schedule_.T;
  const auto images = std::span<const GrayImage>(ds.images);
  const Tensor train_z = encode(images.subspan(cfg.train_begin, cfg.train_end - cfg.train_begin));
  const Tensor train_r = landmark_raster(landmarks.subspan(cfg.train_begin, cfg.train_end - cfg.train_begin));
  const std::size_t val_end = std::min(cfg.val_end, cfg.val_begin + cfg.val_limit);
  const Tensor val_z = encode(images.subspan(cfg.val_begin, val_end - cfg.val_begin));
  const Tensor val_r = landmark_raster(landmarks.subspan(cfg.val_begin, val_end - cfg.val_begin));

  Rng val_rng(cfg.seed ^ 0x5A5A5A5Aull);
  const Tensor val_eps = Tensor::randn(val_z.shape(), val_rng);
  std::vector<std::size_t> val_t(val_z.dim(0));
  for (auto& t : val_t) t = std::uniform_int_distribution<std::size_t>(1, T)(val_rng);
  const Tensor val_zt = clamp_upper(noise_batch(val_z, val_t, val_eps, schedule_), val_z);
  const auto val_loss = [&] {
    NoGradGuard no_grad;
    return masked_noise_loss(val_eps, dual_eps(val_zt, val_t, lmenc_.forward(val_r))).item();
  };

  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam adam(ac);
  auto order = iota_range(0, train_z.dim(0));
  StageResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      const Tensor z0 = take_rows(train_z, idx);
      const Tensor raster = take_rows(train_r, idx);
      const Tensor eps = Tensor::randn(z0.shape(), rng);
      std::vector<std::size_t> t(idx.size());
      for (auto& v : t) v = std::uniform_int_distribution<std::size_t>(1, T)(rng);
      const Tensor zt = clamp_upper(noise_batch(z0, t, eps, schedule_), z0);
      Tensor loss = masked_noise_loss(eps, dual_eps(zt, t, lmenc_.forward(raster)));
      store_.zero_grad();
      loss.backward();
      adam.step(store_, "synth.lmenc");
      total += loss.item() * static_cast<double>(idx.size());
    }
    if (store_.checksum("synth.base") != frozen) {
      throw std::logic_error("frozen base parameters changed during synthesis training");
    }
    result.train_loss.push_back(total / static_cast<double>(order.size()));
    result.val_loss.push_back(val_loss());
    if (!std::isfinite(result.train_loss.back())) throw std::runtime_error("synthesis training diverged");
    if (cfg.on_epoch) cfg.on_epoch(epoch, result.train_loss.back(), result.val_loss.back());
  }
  return result;
}

GeneratedFace FaceSynthesizer::generate_face(const GrayImage& image, const Landmark68& lm,
                                             std::uint64_t seed) const {
  if (image.width != config_.image_size || image.height != config_.image_size) {
    throw ValidationError("generate_face expects a " + std::to_string(config_.image_size) + "x" +
                          std::to_string(config_.image_size) + " image");
  }
  NoGradGuard no_grad;
  const std::size_t keep = image.height / 2;
  GrayImage upper_only = image;
  std::fill(upper_only.pixels.begin() + static_cast<long>(keep * image.width), upper_only.pixels.end(), 0.0);

  GeneratedFace out;
  out.z0_upper = encode(std::span<const GrayImage>(&upper_only, 1));
  const auto tokens = landmark_tokens(std::span<const Landmark68>(&lm, 1));
  const EpsModel model = [&](const Tensor& z, std::size_t t, const Tensor&) {
    const std::size_t steps[1] = {t};
    return dual_eps(z, steps, tokens);
  };
  out.latent = sample_loop(model, out.z0_upper, Tensor(), schedule_, seed);
  out.image = quantize8(tensor_to_image(ae_.decode(out.latent)));
  std::copy(image.pixels.begin(), image.pixels.begin() + static_cast<long>(keep * image.width),
            out.image.pixels.begin());
  return out;
}

}  // namespace difftalk
