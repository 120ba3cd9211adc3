#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "difftalk/errors.hpp"
#include "difftalk/pipeline.hpp"
#include "difftalk/selfcheck.hpp"

using namespace difftalk;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kSelfcheck = 3 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool ablate_am = false;
  std::string frames;
};

RunConfig resolve(const Flags& f) {
  RunConfig cfg = f.config.empty() ? default_config() : load_config(f.config);
  if (f.seed) {
    cfg.seed = *f.seed;
    refresh_derived(cfg);
  }
  if (f.ablate_am) cfg.completion.ablate_am = true;
  if (!f.frames.empty()) cfg.sample_frames = parse_frame_range(f.frames);
  validate(cfg);
  return cfg;
}

int run_selfcheck_cmd() {
  const auto results = run_selfcheck();
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%s %s%s%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.empty() ? "" : ": ",
                r.detail.c_str());
    failed += !r.passed;
  }
  std::printf("%zu of %zu checks passed\n", results.size() - failed, results.size());
  return failed ? kSelfcheck : kOk;
}

int dispatch(const std::string& cmd, const Flags& flags) {
  if (cmd == "selfcheck") return run_selfcheck_cmd();
  const RunConfig cfg = resolve(flags);
  if (cmd == "gen-data") {
    const Dataset ds = cmd_gen_data(cfg);
    std::printf("wrote %zu frames to %s\n", ds.size(), cfg.data_dir.c_str());
  } else if (cmd == "train-landmarks") {
    RunConfig run = cfg;
    run.completion_train.on_epoch = [](std::size_t e, double loss) {
      std::printf("epoch %zu loss %.6g\n", e, loss);
      std::fflush(stdout);
    };
    const auto s = cmd_train_landmarks(run);
    std::printf("held-out LD %.6g (%s)\n", s.heldout_ld, completion_checkpoint(cfg).c_str());
  } else if (cmd == "train-face") {
    RunConfig run = cfg;
    for (auto* st : {&run.ae_stage, &run.base_stage, &run.face_stage}) {
      st->on_epoch = [](std::size_t e, double tr, double va) {
        std::printf("epoch %zu train %.6g val %.6g\n", e, tr, va);
        std::fflush(stdout);
      };
    }
    const auto s = cmd_train_face(run);
    std::printf("autoencoder held-out MSE %.6g%s\n", s.ae_heldout_mse, s.ae_resumed ? " (resumed)" : "");
    if (s.base_resumed) std::printf("base denoiser resumed\n");
    if (s.face_resumed) std::printf("landmark branch resumed\n");
  } else if (cmd == "sample") {
    cmd_sample(cfg, [](std::size_t f, const GrayImage&, const Landmark68&, const GeneratedFace&) {
      std::printf("frame %zu\n", f);
      std::fflush(stdout);
    });
    std::printf("samples in %s\n", cfg.out_dir.c_str());
  } else if (cmd == "eval") {
    const EvalReport r = cmd_eval(cfg);
    std::printf("frames %zu mean LD %.6g PSNR %.4g SSIM %.4g\n", r.frames.size(), r.mean_ld, r.mean_psnr,
                r.mean_ssim);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-driven talking-face pipeline on synthetic data"};
  app.require_subcommand(1);
  Flags flags;
  const char* commands[][2] = {
      {"gen-data", "Generate the synthetic dataset"},
      {"train-landmarks", "Train landmark completion"},
      {"train-face", "Train autoencoder, base denoiser and landmark branch (resumable per stage)"},
      {"sample", "Complete landmarks and generate faces for a frame range"},
      {"eval", "Score samples against the ground truth"},
      {"selfcheck", "Run the invariant suite"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "Config file (key = value)");
    sub->add_option("--seed", flags.seed, "Override the run seed");
    sub->add_flag("--ablate-am", flags.ablate_am, "Route audio into BM-Trans and drop AM-Trans");
    sub->add_option("--frames", flags.frames, "Frame range A..B (half-open)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return dispatch(cmd, flags);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return kRuntime;
  }
}
