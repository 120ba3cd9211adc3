#include "difftalk/completion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

constexpr std::size_t kContourCount = kUpperCount + kLowerContourCount;

// Per-frame centroid of the upper points; all network coordinates live in this frame.
std::vector<Point> centroids(const Tensor& upper) {
  const std::size_t b = upper.dim(0);
  const auto v = upper.data();
  std::vector<Point> c(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < kUpperCount; ++p) {
      c[i].x += v[(i * kUpperCount + p) * 2];
      c[i].y += v[(i * kUpperCount + p) * 2 + 1];
    }
    c[i].x /= kUpperCount;
    c[i].y /= kUpperCount;
  }
  return c;
}

Tensor to_local(const Tensor& upper, const std::vector<Point>& c, double s) {
  std::vector<double> v(upper.data().begin(), upper.data().end());
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (std::size_t p = 0; p < kUpperCount; ++p) {
      v[(i * kUpperCount + p) * 2] = (v[(i * kUpperCount + p) * 2] - c[i].x) * s;
      v[(i * kUpperCount + p) * 2 + 1] = (v[(i * kUpperCount + p) * 2 + 1] - c[i].y) * s;
    }
  }
  return Tensor::from_data(upper.shape(), std::move(v));
}

Tensor centroid_field(const std::vector<Point>& c, std::size_t n) {
  std::vector<double> v;
  v.reserve(c.size() * n * 2);
  for (const Point& p : c) {
    for (std::size_t k = 0; k < n; ++k) {
      v.push_back(p.x);
      v.push_back(p.y);
    }
  }
  return Tensor::from_data({c.size(), n, 2}, std::move(v));
}

Tensor points_tensor(const std::vector<std::vector<Point>>& sets, std::size_t n) {
  std::vector<double> v;
  v.reserve(sets.size() * n * 2);
  for (const auto& s : sets) {
    if (s.size() != n) {
      throw ValidationError("expected " + std::to_string(n) + " points, got " + std::to_string(s.size()));
    }
    for (const Point& p : s) {
      v.push_back(p.x);
      v.push_back(p.y);
    }
  }
  return Tensor::from_data({sets.size(), n, 2}, std::move(v));
}

std::vector<Point> tensor_points(const Tensor& t, std::size_t batch) {
  const std::size_t n = t.dim(1);
  const auto v = t.data();
  std::vector<Point> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = {v[(batch * n + k) * 2], v[(batch * n + k) * 2 + 1]};
  return out;
}

}  // namespace

CompletionModel::CompletionModel(const CompletionConfig& config, std::uint64_t seed)
    : config_(config) {
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  audio_ = TemporalEncoder(store_, "completion.audio", rng);
  audio_proj_ = nn::Linear(store_, "completion.audio.tokens", kAudioEmbeddingDim,
                           config_.audio_tokens * d, rng);

  lf_in_ = nn::Mlp(store_, "completion.lf.in", 2, d, d, rng);
  lf_pos_ = store_.add("completion.lf.pos", Tensor::randn({kUpperCount, d}, rng, 0.1));
  lf_queries_ = store_.add("completion.lf.queries", Tensor::randn({kLowerContourCount, d}, rng, 0.1));
  lf_ = make_stack("completion.lf", config_.layers, config_.layers, rng);
  lf_out_ = nn::Mlp(store_, "completion.lf.out", d, d, 2, rng);

  bm_in_ = nn::Mlp(store_, "completion.bm.in", 2, d, d, rng);
  bm_pos_ = store_.add("completion.bm.pos", Tensor::randn({kContourCount, d}, rng, 0.1));
  bm_queries_ = store_.add("completion.bm.queries", Tensor::randn({kMouthCount, d}, rng, 0.1));
  bm_ = make_stack("completion.bm", 1, config_.layers, rng);
  bm_out_ = nn::Mlp(store_, "completion.bm.out", d, d, 2, rng);

  if (!config_.ablate_am) {
    am_in_ = nn::Mlp(store_, "completion.am.in", 2, d, d, rng);
    am_pos_ = store_.add("completion.am.pos", Tensor::randn({kMouthCount, d}, rng, 0.1));
    am_ = make_stack("completion.am", 0, config_.layers, rng);
    am_out_ = nn::Mlp(store_, "completion.am.out", d, d, 2, rng, nn::Init::kZero);
  }
}

CompletionModel::Stack CompletionModel::make_stack(const std::string& prefix,
                                                   std::size_t self_layers,
                                                   std::size_t cross_layers, Rng& rng) {
  const std::size_t d = config_.d_model;
  Stack s;
  for (std::size_t l = 0; l < self_layers; ++l) {
    const std::string p = prefix + ".self" + std::to_string(l);
    s.self_attn.emplace_back(store_, p + ".attn", d, d, config_.heads, rng);
    s.self_ffn.emplace_back(store_, p + ".ffn", d, config_.ffn_hidden, rng);
  }
  for (std::size_t l = 0; l < cross_layers; ++l) {
    const std::string p = prefix + ".cross" + std::to_string(l);
    s.cross_attn.emplace_back(store_, p + ".attn", d, d, config_.heads, rng);
    s.cross_ffn.emplace_back(store_, p + ".ffn", d, config_.ffn_hidden, rng);
  }
  return s;
}

Tensor CompletionModel::run_stack(const Stack& s, Tensor tokens, Tensor queries,
                                  const Tensor* extra_ctx) const {
  for (std::size_t l = 0; l < s.self_attn.size(); ++l) {
    tokens = s.self_ffn[l](s.self_attn[l].self_attend(tokens));
  }
  const Tensor ctx = extra_ctx ? ops::concat({tokens, *extra_ctx}, 1) : tokens;
  for (std::size_t l = 0; l < s.cross_attn.size(); ++l) {
    queries = s.cross_ffn[l](s.cross_attn[l].cross_attend(queries, ctx));
  }
  return queries;
}

Tensor CompletionModel::embed_points(const nn::Mlp& mlp, const Tensor& pos,
                                     const Tensor& coords) const {
  return ops::add(mlp(coords), pos);
}

Tensor CompletionModel::audio_context(const Tensor& embedding) const {
  return ops::reshape(audio_proj_(embedding),
                      {embedding.dim(0), config_.audio_tokens, config_.d_model});
}

Tensor CompletionModel::lf_core(const Tensor& upper_n) const {
  const Tensor tokens = embed_points(lf_in_, lf_pos_, upper_n);
  const Tensor q = run_stack(lf_, tokens, ops::repeat_leading(lf_queries_, upper_n.dim(0)), nullptr);
  return lf_out_(q);
}

Tensor CompletionModel::bm_core(const Tensor& contour_n, const Tensor* audio_ctx) const {
  const Tensor tokens = embed_points(bm_in_, bm_pos_, contour_n);
  const Tensor q = run_stack(bm_, tokens, ops::repeat_leading(bm_queries_, contour_n.dim(0)), audio_ctx);
  return bm_out_(q);
}

Tensor CompletionModel::am_core(const Tensor& audio_ctx, const Tensor& base_n) const {
  const Tensor q = run_stack(am_, audio_ctx, embed_points(am_in_, am_pos_, base_n), nullptr);
  return ops::scale(ops::tanh(am_out_(q)), config_.offset_bound);
}

CompletionModel::Output CompletionModel::forward(const Tensor& upper, const Tensor& windows) const {
  if (upper.ndim() != 3 || upper.dim(1) != kUpperCount || upper.dim(2) != 2) {
    throw DimensionError("completion expects upper points [B, 39, 2], got " + shape_str(upper.shape()));
  }
  if (windows.ndim() != 3 || windows.dim(0) != upper.dim(0)) {
    throw DimensionError("audio windows " + shape_str(windows.shape()) + " do not match batch " +
                         shape_str(upper.shape()));
  }
  const double s = config_.coord_scale;
  const auto c = centroids(upper);
  const Tensor upper_n = to_local(upper, c, s);

  Output out;
  const Tensor lower_n = lf_core(upper_n);
  const Tensor contour_n = ops::concat({upper_n, lower_n}, 1);
  const Tensor actx = audio_context(audio_.forward(windows));
  out.lower = ops::add(ops::scale(lower_n, 1.0 / s), centroid_field(c, kLowerContourCount));
  if (config_.ablate_am) {
    out.base_mouth = ops::add(ops::scale(bm_core(contour_n, &actx), 1.0 / s),
                              centroid_field(c, kMouthCount));
    out.offsets = Tensor::zeros({upper.dim(0), kMouthCount, 2});
    out.mouth = out.base_mouth;
  } else {
    const Tensor base_n = bm_core(contour_n, nullptr);
    out.base_mouth = ops::add(ops::scale(base_n, 1.0 / s), centroid_field(c, kMouthCount));
    out.offsets = am_core(actx, base_n);
    out.mouth = ops::add(out.base_mouth, out.offsets);
  }
  out.predicted = ops::concat({out.lower, out.mouth}, 1);
  return out;
}

std::vector<Point> CompletionModel::lf_forward(std::span<const Point> upper) const {
  NoGradGuard no_grad;
  const Tensor u = points_tensor({std::vector<Point>(upper.begin(), upper.end())}, kUpperCount);
  const auto c = centroids(u);
  const Tensor lower = ops::add(ops::scale(lf_core(to_local(u, c, config_.coord_scale)),
                                           1.0 / config_.coord_scale),
                                centroid_field(c, kLowerContourCount));
  return tensor_points(lower, 0);
}

std::vector<Point> CompletionModel::bm_forward(std::span<const Point> contour) const {
  if (config_.ablate_am) throw std::logic_error("bm_forward without audio is undefined in ablation mode");
  NoGradGuard no_grad;
  const Tensor all = points_tensor({std::vector<Point>(contour.begin(), contour.end())}, kContourCount);
  const Tensor u = ops::reshape(ops::index_select(all, 1, [] {
    std::vector<std::size_t> idx(kUpperCount);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }()), {1, kUpperCount, 2});
  const auto c = centroids(u);
  const double s = config_.coord_scale;
  const Tensor contour_n = ops::scale(ops::sub(all, centroid_field(c, kContourCount)), s);
  const Tensor mouth = ops::add(ops::scale(bm_core(contour_n, nullptr), 1.0 / s),
                                centroid_field(c, kMouthCount));
  return tensor_points(mouth, 0);
}

std::vector<Point> CompletionModel::am_forward(std::span<const Point> upper,
                                               const AudioEmbedding& audio,
                                               std::span<const Point> base_mouth) const {
  if (config_.ablate_am) return std::vector<Point>(kMouthCount);
  NoGradGuard no_grad;
  const Tensor u = points_tensor({std::vector<Point>(upper.begin(), upper.end())}, kUpperCount);
  const auto c = centroids(u);
  const Tensor base = points_tensor({std::vector<Point>(base_mouth.begin(), base_mouth.end())}, kMouthCount);
  const Tensor base_n = ops::scale(ops::sub(base, centroid_field(c, kMouthCount)), config_.coord_scale);
  const Tensor emb = Tensor::from_data({1, kAudioEmbeddingDim}, std::vector<double>(audio.begin(), audio.end()));
  return tensor_points(am_core(audio_context(emb), base_n), 0);
}

Landmark68 CompletionModel::complete(std::span<const Point> upper, const AudioWindow& win) const {
  return complete_batch({std::vector<Point>(upper.begin(), upper.end())},
                        std::span<const AudioWindow>(&win, 1))
      .front();
}

Landmark68 CompletionModel::complete(std::span<const Point> upper, const AudioEmbedding& audio) const {
  NoGradGuard no_grad;
  const std::vector<Point> up(upper.begin(), upper.end());
  const Tensor u = points_tensor({up}, kUpperCount);
  const double s = config_.coord_scale;
  const auto c = centroids(u);
  const Tensor upper_n = to_local(u, c, s);
  const Tensor lower_n = lf_core(upper_n);
  const Tensor contour_n = ops::concat({upper_n, lower_n}, 1);
  const Tensor emb = Tensor::from_data({1, kAudioEmbeddingDim}, std::vector<double>(audio.begin(), audio.end()));
  const Tensor actx = audio_context(emb);
  Tensor mouth;
  if (config_.ablate_am) {
    mouth = ops::add(ops::scale(bm_core(contour_n, &actx), 1.0 / s), centroid_field(c, kMouthCount));
  } else {
    const Tensor base_n = bm_core(contour_n, nullptr);
    mouth = ops::add(ops::add(ops::scale(base_n, 1.0 / s), centroid_field(c, kMouthCount)),
                     am_core(actx, base_n));
  }
  const Tensor lower = ops::add(ops::scale(lower_n, 1.0 / s), centroid_field(c, kLowerContourCount));
  return merge({up, tensor_points(lower, 0), tensor_points(mouth, 0)});
}

std::vector<Landmark68> CompletionModel::complete_batch(const std::vector<std::vector<Point>>& uppers,
                                                        std::span<const AudioWindow> windows) const {
  if (uppers.size() != windows.size()) throw ValidationError("upper/audio batch size mismatch");
  NoGradGuard no_grad;
  const Output out = forward(points_tensor(uppers, kUpperCount), windows_to_tensor(windows));
  std::vector<Landmark68> result;
  result.reserve(uppers.size());
  for (std::size_t b = 0; b < uppers.size(); ++b) {
    result.push_back(merge({uppers[b], tensor_points(out.lower, b), tensor_points(out.mouth, b)}));
  }
  return result;
}

double completion_loss(const Landmark68& pred, const Landmark68& gt, const RegionPartition& part) {
  const auto r = part.predicted();
  double sum = 0.0;
  for (auto i : r) {
    const double dx = pred.points[i].x - gt.points[i].x, dy = pred.points[i].y - gt.points[i].y;
    sum += dx * dx + dy * dy;
  }
  return sum / static_cast<double>(r.size());
}

double region_distance(const Landmark68& pred, const Landmark68& gt, const RegionPartition& part) {
  const auto r = part.predicted();
  double sum = 0.0;
  for (auto i : r) sum += std::hypot(pred.points[i].x - gt.points[i].x, pred.points[i].y - gt.points[i].y);
  return sum / static_cast<double>(r.size());
}

CompletionBatch completion_inputs(const Dataset& ds, std::span<const std::size_t> frames) {
  const auto& part = RegionPartition::standard();
  CompletionBatch b;
  for (auto f : frames) {
    if (f >= ds.size()) throw std::out_of_range("frame " + std::to_string(f) + " outside dataset");
    b.uppers.push_back(split(ds.landmarks[f], part).upper);
    b.windows.push_back(window(ds.audio, f));
    b.targets.push_back(ds.landmarks[f]);
  }
  return b;
}

CompletionTrainResult train_completion(CompletionModel& model, const Dataset& ds,
                                       const CompletionTrainConfig& config) {
  if (ds.size() == 0) throw ValidationError("cannot train completion on an empty dataset");
  const std::size_t end = std::min(config.train_end, ds.size());
  if (config.train_begin >= end) throw ValidationError("empty completion training range");
  if (config.batch_size == 0) throw ValidationError("batch size must be positive");
  if (!(config.lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(config.tempo_jitter >= 0.0 && config.tempo_jitter <= 1.0)) {
    throw ValidationError("tempo jitter must lie in [0, 1]");
  }

  const auto predicted = RegionPartition::standard().predicted();
  std::vector<std::size_t> order(end - config.train_begin);
  std::iota(order.begin(), order.end(), config.train_begin);
  Rng rng(config.seed ^ 0xC0FFEEull);
  Rng tempo_rng(config.seed ^ 0x7E3B0ull);
  std::uniform_real_distribution<double> speed(1.0 - config.tempo_jitter, 1.0 + config.tempo_jitter);
  AdamConfig adam_cfg;
  adam_cfg.lr = config.lr;
  Adam adam(adam_cfg);
  ParamStore& store = model.params();

  const std::size_t steps_per_epoch = (order.size() + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);
  CompletionTrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> frames(order.data() + start, stop - start);
      CompletionBatch batch = completion_inputs(ds, frames);
      if (config.tempo_jitter > 0.0) {
        for (std::size_t k = 0; k < frames.size(); ++k) {
          batch.windows[k] = resampled_window(ds.audio, frames[k], speed(tempo_rng));
        }
      }
      std::vector<double> target;
      target.reserve(frames.size() * predicted.size() * 2);
      for (const auto& lm : batch.targets) {
        for (auto i : predicted) {
          target.push_back(lm.points[i].x);
          target.push_back(lm.points[i].y);
        }
      }
      const Tensor target_t = Tensor::from_data({frames.size(), predicted.size(), 2}, std::move(target));
      const auto out = model.forward(points_tensor(batch.uppers, kUpperCount), windows_to_tensor(batch.windows));
      // mse averages over B*29*2 values; the loss sums the two coordinates per point
      Tensor loss = ops::scale(ops::mse(out.predicted, target_t), 2.0);
      store.zero_grad();
      loss.backward();
      if (config.cosine_decay) {
        adam.set_lr(config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(adam.steps()) / total_steps)));
      }
      adam.step(store);
      total += loss.item() * static_cast<double>(frames.size());
      seen += frames.size();
    }
    const double mean = total / static_cast<double>(seen);
    if (!std::isfinite(mean)) throw std::runtime_error("completion training diverged at epoch " + std::to_string(epoch));
    result.epoch_loss.push_back(mean);
    if (config.on_epoch) config.on_epoch(epoch, mean);
  }
  return result;
}

double heldout_distance(const CompletionModel& model, const Dataset& ds, std::size_t begin,
                        std::size_t end) {
  end = std::min(end, ds.size());
  if (begin >= end) throw ValidationError("empty evaluation range");
  double sum = 0.0;
  constexpr std::size_t kChunk = 100;
  for (std::size_t start = begin; start < end; start += kChunk) {
    std::vector<std::size_t> frames(std::min(kChunk, end - start));
    std::iota(frames.begin(), frames.end(), start);
    const CompletionBatch b = completion_inputs(ds, frames);
    const auto pred = model.complete_batch(b.uppers, b.windows);
    for (std::size_t i = 0; i < pred.size(); ++i) sum += region_distance(pred[i], b.targets[i]);
  }
  return sum / static_cast<double>(end - begin);
}

}  // namespace difftalk
