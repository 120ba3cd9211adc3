#include "difftalk/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>

#include "difftalk/audio.hpp"
#include "difftalk/completion.hpp"
#include "difftalk/dataset.hpp"
#include "difftalk/diffusion.hpp"
#include "difftalk/gradcheck.hpp"
#include "difftalk/landmarks.hpp"
#include "difftalk/layers.hpp"
#include "difftalk/synthesis.hpp"

namespace difftalk {

namespace {

constexpr double kGradTol = 1e-4;

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

// values kept at least `gap` away from zero, for ops with a kink there
Tensor randn_off_zero(Shape shape, Rng& rng, double gap) {
  Tensor t = Tensor::randn(std::move(shape), rng, 1.0, true);
  for (auto& v : t.mutable_data()) v += v < 0 ? -gap : gap;
  return t;
}

void randomize(ParamStore& store, std::string_view prefix, const std::string& needle, double stddev,
               std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (const auto& p : store.paths(prefix)) {
    if (p.find(needle) == std::string::npos) continue;
    Tensor t = store.get(p);
    for (auto& v : t.mutable_data()) v = normal(rng);
  }
}

std::vector<Tensor> entries(const ParamStore& store, std::string_view prefix,
                            const std::string& needle = {}) {
  std::vector<Tensor> out;
  for (const auto& p : store.paths(prefix)) {
    if (needle.empty() || p.find(needle) != std::string::npos) out.push_back(store.get(p));
  }
  return out;
}

// loss = sum(f() * W) with a fixed random W, so every output component carries gradient
CheckResult grad_case(const std::string& name, const std::function<Tensor()>& f,
                      const std::vector<Tensor>& inputs, std::size_t per_input = 0,
                      std::uint64_t seed = 1) {
  Shape shape;
  {
    NoGradGuard g;
    shape = f().shape();
  }
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const Tensor w = Tensor::randn(shape, rng);
  const auto r = check_gradients([&] { return ops::sum(ops::mul(f(), w)); }, inputs, 1e-5, per_input, seed);
  CheckResult c;
  c.name = "grad " + name;
  c.passed = r.checked > 0 && r.max_rel_error <= kGradTol;
  c.detail = fmt("max rel err %.2e over %.0f entries", r.max_rel_error, static_cast<double>(r.checked));
  return c;
}

SynthesisConfig tiny_synthesis() {
  SynthesisConfig c;
  c.image_size = 32;
  c.unet.c1 = 8;
  c.unet.c2 = 16;
  c.unet.groups = 2;
  c.unet.time_dim = 16;
  c.unet.ctx_dim = 8;
  c.diffusion_steps = 10;
  return c;
}

std::size_t mismatches_upper(const Tensor& a, const Tensor& b) {
  const auto& s = a.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t up = upper_rows(h);
  std::size_t bad = 0;
  for (std::size_t base = 0; base < a.numel(); base += h * w)
    for (std::size_t i = 0; i < up * w; ++i) bad += a[base + i] != b[base + i];
  return bad;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

CheckResult result(std::string name, bool ok, std::string detail = {}) {
  return CheckResult{std::move(name), ok, std::move(detail)};
}

}  // namespace

std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> out;
  Rng rng(2024);

  {
    Tensor a = randn({3, 4}, rng), b = randn({4, 5}, rng);
    out.push_back(grad_case("matmul", [&] { return ops::matmul(a, b); }, {a, b}));
  }
  {
    Tensor x = randn({2, 3, 4}, rng), w = randn({4, 5}, rng), b = randn({5}, rng);
    out.push_back(grad_case("linear", [&] { return ops::linear(x, w, b); }, {x, w, b}));
  }
  {
    Tensor a = randn({2, 3, 4}, rng), b = randn({4}, rng), c = randn({2, 3, 4}, rng);
    out.push_back(grad_case("add/sub/mul broadcast",
                            [&] { return ops::mul(ops::sub(ops::add(a, b), c), ops::add(c, b)); }, {a, b, c}));
  }
  {
    Tensor x = randn({12}, rng);
    out.push_back(grad_case("scale/add_scalar/square", [&] { return ops::square(ops::add_scalar(ops::scale(x, 1.7), 0.3)); }, {x}));
    out.push_back(grad_case("tanh", [&] { return ops::tanh(x); }, {x}));
    out.push_back(grad_case("silu", [&] { return ops::silu(x); }, {x}));
  }
  {
    Tensor x = randn_off_zero({12}, rng, 0.2);
    out.push_back(grad_case("relu", [&] { return ops::relu(x); }, {x}));
    out.push_back(grad_case("leaky_relu", [&] { return ops::leaky_relu(x, 0.1); }, {x}));
  }
  {
    Tensor a = randn({3, 4}, rng), b = randn({3, 4}, rng);
    out.push_back(grad_case("sum/mean", [&] { return ops::add(ops::sum(ops::square(a)), ops::mean(ops::mul(a, b))); }, {a, b}));
    out.push_back(grad_case("mse", [&] { return ops::mse(a, b); }, {a, b}));
  }
  {
    Tensor a = randn({2, 3, 4}, rng), b = randn({2, 2, 4}, rng), c = randn({3, 4}, rng);
    const std::vector<std::size_t> idx = {2, 0, 2};
    out.push_back(grad_case("reshape/swap_last2/concat/index_select/repeat_leading", [&] {
      const Tensor cat = ops::concat({a, b}, 1);
      const Tensor sel = ops::index_select(cat, 1, idx);
      return ops::add(ops::reshape(ops::swap_last2(sel), {2, 12}), ops::reshape(ops::repeat_leading(c, 2), {2, 12}));
    }, {a, b, c}));
  }
  {
    Tensor x = randn({3, 5}, rng, 2.0);
    out.push_back(grad_case("softmax axis 0", [&] { return ops::softmax(x, 0); }, {x}));
    out.push_back(grad_case("softmax axis 1", [&] { return ops::softmax(x, 1); }, {x}));
  }
  {
    Tensor q = randn({2, 3, 4}, rng), k = randn({2, 5, 4}, rng), v = randn({2, 5, 4}, rng);
    out.push_back(grad_case("attention", [&] { return ops::attention(q, k, v); }, {q, k, v}));
    out.push_back(grad_case("attention 2 heads", [&] { return ops::attention(q, k, v, 2); }, {q, k, v}));
  }
  {
    Tensor x = randn({2, 3, 6}, rng), g = randn({6}, rng), b = randn({6}, rng);
    out.push_back(grad_case("layer_norm", [&] { return ops::layer_norm(x, g, b); }, {x, g, b}));
  }
  {
    Tensor x = randn({2, 4, 3, 3}, rng), g = randn({4}, rng), b = randn({4}, rng);
    out.push_back(grad_case("group_norm", [&] { return ops::group_norm(x, 2, g, b); }, {x, g, b}));
  }
  {
    Tensor x = randn({1, 2, 5, 5}, rng), w = randn({3, 2, 3, 3}, rng), b = randn({3}, rng);
    ops::Conv2dGeometry geom{2, 2, 1, 1};
    out.push_back(grad_case("conv2d stride 2 pad 1", [&] { return ops::conv2d(x, w, b, geom); }, {x, w, b}));
  }
  {
    Tensor x = randn({2, 3, 8}, rng), w = randn({4, 3, 3}, rng), b = randn({4}, rng);
    out.push_back(grad_case("conv1d stride 2 pad 1", [&] { return ops::conv1d(x, w, b, 2, 1); }, {x, w, b}));
  }
  {
    Tensor x = randn({2, 3, 2, 2}, rng), e = randn({2, 3}, rng);
    out.push_back(grad_case("upsample2x/add_channelwise/tokens", [&] {
      const Tensor up = ops::add_channelwise(ops::upsample2x(x), e);
      return ops::from_tokens(ops::tanh(ops::to_tokens(up)), 4, 4);
    }, {x, e}));
  }
  {
    ParamStore store;
    nn::AttentionBlock self_att(store, "s", 6, 6, 2, rng);
    nn::AttentionBlock att(store, "a", 6, 4, 2, rng);
    nn::FeedForward ff(store, "f", 6, 12, rng);
    Tensor x = randn({2, 3, 6}, rng), ctx = randn({2, 5, 4}, rng);
    std::vector<Tensor> in = entries(store, "");
    in.push_back(x);
    in.push_back(ctx);
    out.push_back(grad_case("attention/feed-forward blocks",
                            [&] { return ff(att.cross_attend(self_att.self_attend(x), ctx)); }, in));
  }
  {
    ParamStore store;
    ResBlock rb(store, "rb", 4, 6, 2, 8, rng);
    Tensor x = randn({2, 4, 3, 3}, rng), temb = randn({2, 8}, rng);
    std::vector<Tensor> in = entries(store, "");
    in.push_back(x);
    in.push_back(temb);
    out.push_back(grad_case("residual conv block", [&] { return rb(x, temb); }, in, 12));
  }
  {
    ParamStore store;
    TemporalEncoder enc(store, "audio", rng);
    Tensor win = randn({2, kAudioWindowFrames, kAudioFeatureDim}, rng);
    std::vector<Tensor> in = {enc.conv_weight(0), enc.conv_weight(1), enc.conv_weight(2), win};
    out.push_back(grad_case("audio temporal conv", [&] { return enc.forward(win); }, in, 40));
  }
  {
    ParamStore store;
    UNetConfig cfg = tiny_synthesis().unet;
    CondUNet unet(store, "u", cfg, rng);
    Tensor z = randn({1, 4, 4, 4}, rng), tokens = randn({1, 3, cfg.ctx_dim}, rng);
    const std::vector<std::size_t> t = {3};
    std::vector<Tensor> in = entries(store, "u", "attn");
    in.push_back(z);
    in.push_back(tokens);
    out.push_back(grad_case("unet cross-attention", [&] { return unet.forward(z, t, tokens); }, in, 6));
  }
  {
    FaceSynthesizer s(tiny_synthesis(), 3);
    randomize(s.params(), "synth.lmenc", ".wo.", 0.3, 5);
    const Dataset ds = generate_dataset(2, 4, 32);
    Tensor z = Tensor::randn({1, 4, 4, 4}, rng);
    const std::vector<std::size_t> t = {5};
    const std::vector<Landmark68> lm = {ds.landmarks[1]};
    out.push_back(grad_case("landmark branch and fusion",
                            [&] { return s.dual_eps(z, t, s.landmark_tokens(lm)); },
                            entries(s.params(), "synth.lmenc"), 2));
  }
  {
    CompletionConfig cc;
    cc.d_model = 16;
    cc.ffn_hidden = 32;
    CompletionModel m(cc, 6);
    randomize(m.params(), "completion.am.out", "fc2.weight", 0.3, 7);
    const Dataset ds = generate_dataset(4, 8, 32);
    const std::vector<std::size_t> frames = {1, 3};
    const CompletionBatch b = completion_inputs(ds, frames);
    std::vector<double> up;
    for (const auto& u : b.uppers)
      for (const auto& p : u) {
        up.push_back(p.x);
        up.push_back(p.y);
      }
    const Tensor upper = Tensor::from_data({2, 39, 2}, up);
    const Tensor win = windows_to_tensor(b.windows);
    out.push_back(grad_case("landmark completion", [&] { return m.forward(upper, win).predicted; },
                            entries(m.params(), "completion"), 2));
  }
  {
    Tensor eps = Tensor::randn({2, 3, 4, 4}, rng), pred = randn({2, 3, 4, 4}, rng);
    out.push_back(grad_case("masked noise loss", [&] { return masked_noise_loss(eps, pred); }, {pred}));
  }
  return out;
}

std::vector<CheckResult> diffusion_algebra_checks() {
  std::vector<CheckResult> out;
  Rng rng(77);
  const NoiseSchedule s = make_schedule(50, 1e-4, 0.2);
  const Tensor z0 = Tensor::randn({2, 4, 8, 8}, rng);
  const Tensor eps = Tensor::randn({2, 4, 8, 8}, rng);
  const Tensor zero = Tensor::zeros({2, 4, 8, 8});
  const std::size_t steps[] = {1, s.T / 2, s.T};

  {
    std::size_t bad = 0;
    for (auto t : steps) {
      const Tensor zt = forward_noise(z0, t, zero, s);
      const double a = std::sqrt(s.alpha_bar[t - 1]);
      for (std::size_t i = 0; i < z0.numel(); ++i) bad += zt[i] != a * z0[i];
    }
    out.push_back(result("forward noising with eps = 0 is sqrt(alpha_bar) z0", bad == 0,
                         fmt("%.0f mismatching entries", static_cast<double>(bad))));
  }
  {
    std::size_t bad_upper = 0;
    double lower_err = 0.0;
    for (auto t : steps) {
      const Tensor zp = partial_forward_noise(z0, t, eps, s);
      bad_upper += mismatches_upper(zp, z0);
      const Tensor zf = forward_noise(z0, t, eps, s);
      for (std::size_t base = 0; base < z0.numel(); base += 64)
        for (std::size_t i = 32; i < 64; ++i) lower_err = std::max(lower_err, std::abs(zp[base + i] - zf[base + i]));
    }
    out.push_back(result("partial noising keeps upper rows bit-identical at t = 1, T/2, T",
                         bad_upper == 0 && lower_err == 0.0,
                         fmt("%.0f upper mismatches, lower deviation %.1e", static_cast<double>(bad_upper), lower_err)));
  }
  {
    Tensor pred = Tensor::randn({2, 4, 8, 8}, rng, 1.0, true);
    Tensor pred2 = pred.detach();
    for (std::size_t base = 0; base < pred2.numel(); base += 64)
      for (std::size_t i = 0; i < 32; ++i) pred2.mutable_data()[base + i] += 5.0 * (i + 1);
    pred2 = Tensor::from_data(pred2.shape(), std::vector<double>(pred2.data().begin(), pred2.data().end()), true);
    const Tensor l1 = masked_noise_loss(eps, pred);
    const Tensor l2 = masked_noise_loss(eps, pred2);
    l1.backward();
    const auto g = pred.grad();
    std::size_t nonzero_upper = 0;
    for (std::size_t base = 0; base < g.size(); base += 64)
      for (std::size_t i = 0; i < 32; ++i) nonzero_upper += g[base + i] != 0.0;
    out.push_back(result("masked loss ignores upper-region predictions", l1[0] == l2[0] && nonzero_upper == 0,
                         fmt("loss delta %.1e, %.0f nonzero upper gradients", l1[0] - l2[0],
                             static_cast<double>(nonzero_upper))));
  }
  {
    const Tensor z1 = forward_noise(z0, 1, eps, s);
    const double err = max_abs_diff(ddim_step(z1, eps, 1, s), z0);
    out.push_back(result("one DDIM step at t = 1 with the true noise recovers z0", err <= 1e-10,
                         fmt("max abs err %.2e", err)));
  }
  {
    double err = 0.0;
    for (const auto& sched : {s, make_schedule(50, 1e-4, 0.02), make_schedule(1000, 1e-4, 0.02)}) {
      double prod = 1.0, logsum = 0.0;
      for (std::size_t t = 1; t <= sched.T; ++t) {
        err = std::max(err, std::abs(sched.alpha[t - 1] - (1.0 - sched.beta[t - 1])));
        prod *= sched.alpha[t - 1];
        logsum += std::log(sched.alpha[t - 1]);
        err = std::max(err, std::abs(sched.alpha_bar_at(t) - prod));
        err = std::max(err, std::abs(sched.alpha_bar_at(t) - std::exp(logsum)));
      }
      err = std::max(err, std::abs(sched.alpha_bar_at(0) - 1.0));
    }
    out.push_back(result("alpha_bar equals the running product of alphas", err <= 1e-12,
                         fmt("max abs err %.2e", err)));
  }
  {
    const EpsModel model = [](const Tensor& z, std::size_t, const Tensor&) { return ops::scale(z, 0.3); };
    const Tensor a = sample_loop(model, z0, Tensor(), s, 5);
    const Tensor b = sample_loop(model, z0, Tensor(), s, 5);
    bool same = true;
    for (std::size_t i = 0; i < a.numel(); ++i) same = same && a[i] == b[i];
    out.push_back(result("sampling loop keeps upper rows and is deterministic",
                         mismatches_upper(a, z0) == 0 && same));
  }
  return out;
}

std::vector<CheckResult> structural_checks() {
  std::vector<CheckResult> out;
  const Dataset ds = generate_dataset(24, 31, 32);

  {
    bool ok = true;
    double err = 0.0;
    for (const auto& lm : ds.landmarks) {
      ok = ok && merge(split(lm)) == lm;
      const auto px = denormalize(lm, 640.0, 480.0);
      const Landmark68 back = normalize(px, 640.0, 480.0);
      for (std::size_t i = 0; i < kNumLandmarks; ++i)
        err = std::max({err, std::abs(back.points[i].x - lm.points[i].x), std::abs(back.points[i].y - lm.points[i].y)});
    }
    out.push_back(result("landmark split/merge round trip is exact", ok));
    out.push_back(result("landmark normalize/denormalize round trip", err <= 1e-12, fmt("max err %.1e", err)));
  }
  {
    CompletionModel m({}, 3);
    randomize(m.params(), "completion.am.out", "fc2.weight", 0.5, 4);
    const auto up = split(ds.landmarks[5]).upper;
    const Landmark68 a = m.complete(up, window(ds.audio, 5));
    const Landmark68 b = m.complete(up, window(ds.audio, 20));
    std::size_t outside = 0, inside = 0;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
      const bool diff = !(a.points[i] == b.points[i]);
      (i >= 48 ? inside : outside) += diff;
    }
    out.push_back(result("audio swap moves only mouth landmarks", outside == 0 && inside > 0,
                         fmt("%.0f non-mouth changes, %.0f mouth changes", static_cast<double>(outside),
                             static_cast<double>(inside))));

    const auto dir = std::filesystem::temp_directory_path() / "difftalk_selfcheck";
    std::filesystem::create_directories(dir);
    const auto file = dir / "completion.ckpt";
    save_checkpoint(m.params(), file);
    CompletionModel m2({}, 99);
    load_checkpoint(m2.params(), file);
    out.push_back(result("checkpoint round trip is bit-exact",
                         m2.params().checksum("") == m.params().checksum("") && m2.complete(up, window(ds.audio, 5)) == a));
    std::filesystem::remove_all(dir);
  }
  {
    FaceSynthesizer s(tiny_synthesis(), 5);
    StageConfig sc;
    sc.epochs = 1;
    sc.batch_size = 8;
    sc.train_begin = 0;
    sc.train_end = 16;
    sc.val_begin = 16;
    sc.val_end = 24;
    sc.val_limit = 8;
    s.pretrain_autoencoder(ds, sc);
    s.pretrain_base(ds, sc);
    const auto before = s.params().checksum("synth.base");
    s.train_synthesis(ds, ds.landmarks, sc);
    const auto after = s.params().checksum("synth.base");
    out.push_back(result("base denoiser checksum unchanged by synthesis training", before == after));

    Rng rng(8);
    const Tensor z = Tensor::randn({2, 4, 4, 4}, rng);
    const std::vector<std::size_t> t = {1, 9};
    NoGradGuard g;
    const double d = max_abs_diff(s.base_eps(z, t), s.dual_eps(z, t, {Tensor::zeros({2, 4, 16}), Tensor::zeros({2, 16, 8})}));
    out.push_back(result("null landmark conditioning reproduces the base output", d <= 1e-9, fmt("max diff %.1e", d)));

    const GeneratedFace f = s.generate_face(ds.images[20], ds.landmarks[20], 11);
    std::size_t bad = 0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 32; ++x) bad += f.image.at(x, y) != ds.images[20].at(x, y);
    out.push_back(result("generated face keeps upper-half pixels and latent rows",
                         bad == 0 && mismatches_upper(f.latent, f.z0_upper) == 0));
  }
  return out;
}

std::vector<CheckResult> run_selfcheck() {
  auto all = gradient_checks();
  for (auto part : {diffusion_algebra_checks(), structural_checks()}) {
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return !results.empty();
}

}  // namespace difftalk
