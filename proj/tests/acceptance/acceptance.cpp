// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero on
// any failure. Usage: acceptance [work_dir]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <array>
#include <functional>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "difftalk/audio.hpp"
#include "difftalk/completion.hpp"
#include "difftalk/dataset.hpp"
#include "difftalk/metrics.hpp"
#include "difftalk/pipeline.hpp"
#include "difftalk/selfcheck.hpp"
#include "difftalk/synthesis.hpp"

using namespace difftalk;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  int id;
  std::string title;
  bool passed;
  std::string detail;
};

std::vector<Verdict> g_verdicts;

void report(int id, const std::string& title, bool passed, const std::string& detail) {
  g_verdicts.push_back({id, title, passed, detail});
  std::printf("%s criterion %d %s: %s\n", passed ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
  std::fflush(stdout);
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename... A>
std::string fmt(const char* f, A... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::uint64_t fnv1a(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::map<std::string, std::uint64_t> hash_tree(const fs::path& root) {
  std::map<std::string, std::uint64_t> out;
  if (fs::is_regular_file(root)) {
    out[root.filename().string()] = fnv1a(root);
    return out;
  }
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = fnv1a(e.path());
  }
  return out;
}

// ranks with ties averaged
std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

RunConfig config_in(const fs::path& dir) {
  RunConfig cfg = default_config(dir);
  refresh_derived(cfg);
  return cfg;
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  const auto results = gradient_checks();
  const double secs = since(t0);
  std::size_t failed = 0;
  std::string which;
  for (const auto& r : results) {
    if (!r.passed) {
      ++failed;
      which += " [" + r.name + ": " + r.detail + "]";
    }
  }
  report(1, "gradient correctness", failed == 0 && secs <= 60.0,
         fmt("%zu/%zu op checks within 1e-4 in %.1f s (budget 60 s)", results.size() - failed, results.size(), secs) +
             which);
}

void criterion_diffusion_algebra() {
  const auto t0 = Clock::now();
  const auto results = diffusion_algebra_checks();
  const double secs = since(t0);
  std::size_t failed = 0;
  std::string details;
  for (const auto& r : results) {
    failed += !r.passed;
    details += std::string(" [") + (r.passed ? "ok " : "FAILED ") + r.name + (r.detail.empty() ? "" : ": " + r.detail) + "]";
  }
  report(2, "diffusion algebra", failed == 0 && secs <= 10.0, fmt("%.2f s (budget 10 s)", secs) + details);
}

void criterion_audio_locality(const CompletionModel& model, const Dataset& ds) {
  const auto t0 = Clock::now();
  std::vector<std::pair<std::size_t, std::size_t>> pairs = {{142, 224}};
  std::mt19937_64 rng(5);
  for (int i = 0; i < 49; ++i) pairs.emplace_back(rng() % ds.size(), rng() % ds.size());
  std::size_t outside = 0, mouth_changed_pairs = 0;
  for (const auto& [a, b] : pairs) {
    const auto upper = split(ds.landmarks[a]).upper;
    const Landmark68 la = model.complete(upper, window(ds.audio, a));
    const Landmark68 lb = model.complete(upper, window(ds.audio, b));
    bool mouth = false;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
      const bool same = la.points[i].x == lb.points[i].x && la.points[i].y == lb.points[i].y;
      if (i < 48) outside += !same;
      else mouth = mouth || !same;
    }
    mouth_changed_pairs += mouth;
  }
  const double secs = since(t0);
  report(3, "audio locality", outside == 0 && secs <= 5.0,
         fmt("%zu swapped pairs (incl. upper of 142 with audio of 224): %zu coordinates outside 48..67 changed, "
             "mouth changed in %zu pairs, %.2f s (budget 5 s)",
             pairs.size(), outside, mouth_changed_pairs, secs));
}

void criterion_monotonicity(const CompletionModel& model, const Dataset& ds, const RunConfig& cfg) {
  const AudioCode code = make_audio_code(dataset_audio_seed(cfg.seed));
  std::vector<double> ms, gaps;
  for (int k = 1; k <= 9; ++k) {
    const double m = 0.1 * k;
    const AudioFrame f = encode_mouth(code, m);
    AudioWindow win;
    for (std::size_t r = 0; r < kAudioWindowFrames; ++r)
      std::copy(f.begin(), f.end(), win.block.begin() + r * kAudioFeatureDim);
    double gap = 0.0;
    std::size_t n = 0;
    for (std::size_t fr = cfg.test_begin; fr < cfg.test_end; fr += 10, ++n) {
      gap += inner_lip_gap(model.complete(split(ds.landmarks[fr]).upper, win));
    }
    ms.push_back(m);
    gaps.push_back(gap / static_cast<double>(n));
  }
  const double rho = spearman(ms, gaps);
  std::string g;
  for (double v : gaps) g += fmt(" %.4f", v);
  report(6, "mouth-audio monotonicity", rho >= 0.9, fmt("Spearman rho %.4f (need >= 0.9); mean gaps", rho) + g);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = fs::absolute(argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work"));
  fs::remove_all(work);
  fs::create_directories(work);
  const auto t_all = Clock::now();

  criterion_gradients();
  criterion_diffusion_algebra();

  RunConfig cfg = config_in(work);
  progress("generating " + std::to_string(cfg.frames) + " frames");
  const auto t_gen = Clock::now();
  cmd_gen_data(cfg);
  const double gen_secs = since(t_gen);
  const Dataset ds = load_dataset(cfg.data_dir, false);

  // landmark completion (criterion 4) doubles as seed run 1 of the ablation pairs
  progress("training landmark completion, default configuration");
  const LandmarkTrainSummary lt = cmd_train_landmarks(cfg);
  report(4, "landmark completion training",
         lt.heldout_ld <= 0.01 && cfg.completion_train.epochs <= 50 && lt.seconds <= 900.0,
         fmt("held-out LD %.5f on frames %zu..%zu (need <= 0.01) after %zu epochs on %zu frames, %.0f s (budget 900 s)",
             lt.heldout_ld, cfg.test_begin, cfg.test_end, cfg.completion_train.epochs, cfg.train_end - cfg.train_begin,
             lt.seconds));

  const auto model = load_completion(cfg);
  criterion_audio_locality(*model, ds);
  criterion_monotonicity(*model, ds, cfg);

  {
    double secs = lt.seconds;
    std::vector<double> def = {lt.heldout_ld}, abl;
    std::string pairs;
    const std::uint64_t seeds[] = {cfg.seed, cfg.seed + 1, cfg.seed + 2};
    for (std::size_t k = 0; k < 3; ++k) {
      RunConfig run = cfg;
      run.seed = seeds[k];
      refresh_derived(run);
      if (k > 0) {
        progress(fmt("ablation pair %zu: default", k + 1));
        const auto t0 = Clock::now();
        CompletionModel m(run.completion, run.seed);
        train_completion(m, ds, run.completion_train);
        def.push_back(heldout_distance(m, ds, run.test_begin, run.test_end));
        secs += since(t0);
      }
      progress(fmt("ablation pair %zu: audio into BM-Trans, no AM-Trans", k + 1));
      const auto t0 = Clock::now();
      run.completion.ablate_am = true;
      CompletionModel m(run.completion, run.seed);
      train_completion(m, ds, run.completion_train);
      abl.push_back(heldout_distance(m, ds, run.test_begin, run.test_end));
      secs += since(t0);
      pairs += fmt(" [seed %llu: default %.5f, ablated %.5f]", static_cast<unsigned long long>(seeds[k]), def[k], abl[k]);
    }
    const double md = std::accumulate(def.begin(), def.end(), 0.0) / 3.0;
    const double ma = std::accumulate(abl.begin(), abl.end(), 0.0) / 3.0;
    report(5, "ablation direction", ma >= md && secs <= 1800.0,
           fmt("mean held-out distance ablated %.5f vs default %.5f over 3 paired runs, %.0f s (budget 1800 s)", ma, md,
               secs) + pairs);
  }

  progress("training face synthesis (autoencoder, base, landmark branch)");
  const FaceTrainSummary ft = cmd_train_face(cfg);
  {
    const auto synth = load_synthesizer(cfg);
    const std::uint64_t stored = read_checkpoint(synthesis_checkpoint(cfg, "base")).checksum("synth.base");
    Rng rng(123);
    const std::size_t h = synth->latent_size();
    const Tensor z = Tensor::randn({3, cfg.synthesis.unet.latent_channels, h, h}, rng);
    const std::vector<std::size_t> t = {1, cfg.synthesis.diffusion_steps / 2, cfg.synthesis.diffusion_steps};
    const std::array<Tensor, 2> null = {Tensor::zeros({3, (h / 2) * (h / 2), cfg.synthesis.unet.c2}),
                                        Tensor::zeros({3, h * h, cfg.synthesis.unet.c1})};
    double diff = 0.0;
    {
      NoGradGuard g;
      const Tensor a = synth->base_eps(z, t), b = synth->dual_eps(z, t, null);
      for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    }
    const bool same = ft.base_checksum_before == ft.base_checksum_after && stored == ft.base_checksum_after &&
                      synth->params().checksum("synth.base") == stored;
    report(7, "frozen-base contract", same && diff <= 1e-9,
           fmt("base checksum %016llx before and %016llx after synthesis training (checkpoint %016llx); "
               "null conditioning max |diff| %.3g (need <= 1e-9)",
               static_cast<unsigned long long>(ft.base_checksum_before),
               static_cast<unsigned long long>(ft.base_checksum_after), static_cast<unsigned long long>(stored), diff));
  }

  progress("sampling 50 held-out frames");
  std::size_t frames = 0, pixel_bad = 0, latent_bad = 0;
  double readback_ld = 0.0, psnr_sum = 0.0, ssim_sum = 0.0;
  const auto t_sample = Clock::now();
  RunConfig sample_cfg = cfg;
  sample_cfg.sample_frames = {cfg.test_begin, cfg.test_begin + 50};
  cmd_sample(sample_cfg, [&](std::size_t f, const GrayImage& src, const Landmark68& target, const GeneratedFace& face) {
    ++frames;
    const std::size_t half = src.height / 2;
    for (std::size_t y = 0; y < half; ++y)
      for (std::size_t x = 0; x < src.width; ++x) pixel_bad += face.image.at(x, y) != src.at(x, y);
    const auto& s = face.latent.shape();
    const std::size_t lh = s[2], lw = s[3];
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t i = 0; i < lh / 2; ++i)
        for (std::size_t j = 0; j < lw; ++j) {
          const std::size_t k = (c * lh + i) * lw + j;
          latent_bad += face.latent[k] != face.z0_upper[k];
        }
    readback_ld += landmark_distance(landmarks_from_params(fit_params(face.image)), target);
    (void)f;
  });
  const double sample_secs = since(t_sample);
  report(8, "upper-half fidelity", frames == 50 && pixel_bad == 0 && latent_bad == 0,
         fmt("%zu frames: %zu upper-half pixels and %zu upper latent entries differ", frames, pixel_bad, latent_bad));

  {
    const EvalReport er = cmd_eval(sample_cfg);
    for (const auto& fm : er.frames) {
      psnr_sum += fm.psnr;
      ssim_sum += fm.ssim;
    }
    const double n = static_cast<double>(std::max<std::size_t>(frames, 1));
    const double mpsnr = psnr_sum / n, mssim = ssim_sum / n, mld = readback_ld / n;
    const double train_secs = gen_secs + lt.seconds + ft.seconds;
    report(9, "end-to-end quality",
           er.frames.size() == 50 && mpsnr >= 18.0 && mssim >= 0.6 && mld <= 0.05 && train_secs <= 3600.0,
           fmt("50 held-out frames: PSNR %.2f dB (need >= 18), SSIM %.3f (need >= 0.6), read-back LD %.4f "
               "(need <= 0.05); completion LD %.4f; two-stage training %.0f s (budget 3600 s), sampling %.0f s",
               mpsnr, mssim, mld, er.mean_ld, train_secs, sample_secs));
  }

  {
    progress("determinism reruns");
    std::string detail;
    bool ok = true;
    const auto check = [&](const std::string& what, const fs::path& target, const std::function<void()>& rerun) {
      const auto before = hash_tree(target);
      rerun();
      const auto after = hash_tree(target);
      const bool same = !before.empty() && before == after;
      ok = ok && same;
      detail += fmt(" [%s: %zu files %s]", what.c_str(), after.size(), same ? "identical" : "DIFFER");
    };
    check("gen-data", cfg.data_dir, [&] { cmd_gen_data(cfg); });

    RunConfig small = config_in(work / "determinism");
    small.frames = 240;
    small.train_end = 200;
    small.test_begin = 200;
    small.test_end = 240;
    small.sample_frames = {200, 210};
    small.completion_train.epochs = 3;
    refresh_derived(small);
    cmd_gen_data(small);
    cmd_train_landmarks(small);
    check("train-landmarks", small.ckpt_dir, [&] { cmd_train_landmarks(small); });

    RunConfig resample = cfg;
    resample.out_dir = work / "determinism" / "sample";
    resample.sample_frames = {cfg.test_begin, cfg.test_begin + 5};
    cmd_sample(resample);
    check("sample", resample.out_dir, [&] { cmd_sample(resample); });
    report(10, "determinism", ok, "rerun with identical config and seed:" + detail);
  }

  std::size_t passed = 0;
  for (const auto& v : g_verdicts) passed += v.passed;
  std::printf("%zu of %zu criteria passed in %.0f s\n", passed, g_verdicts.size(), since(t_all));
  return passed == g_verdicts.size() && g_verdicts.size() == 10 ? 0 : 1;
}
