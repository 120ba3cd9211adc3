#include "difftalk/pipeline.hpp"

#include <Eigen/Core>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "difftalk/audio.hpp"
#include "difftalk/diffusion.hpp"
#include "difftalk/image.hpp"
#include "difftalk/landmarks.hpp"
#include "difftalk/param_store.hpp"

namespace difftalk {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "difftalk 0.1.0";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& expected, const std::string& got) {
  throw ValidationError("config key '" + key + "': expected " + expected + ", got '" + got + "'");
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (v.empty() || v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, "a non-negative integer", v);
  }
  if (pos != v.size()) bad_value(key, "a non-negative integer", v);
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, "a number", v);
  }
  if (pos != v.size() || !std::isfinite(x)) bad_value(key, "a finite number", v);
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, "true or false", v);
}

struct Key {
  std::function<void(RunConfig&, const std::string&, const fs::path&)> set;
  std::function<std::string(const RunConfig&)> get;
};

using Registry = std::map<std::string, Key>;

#define DT_SIZE(name, expr)                                                                        \
  r[name] = {[](RunConfig& c, const std::string& v, const fs::path&) { expr = to_size(name, v); }, \
             [](const RunConfig& c) { return std::to_string(expr); }}
#define DT_DOUBLE(name, expr)                                                                        \
  r[name] = {[](RunConfig& c, const std::string& v, const fs::path&) { expr = to_double(name, v); }, \
             [](const RunConfig& c) { return fmt_double(expr); }}
#define DT_BOOL(name, expr)                                                                        \
  r[name] = {[](RunConfig& c, const std::string& v, const fs::path&) { expr = to_bool(name, v); }, \
             [](const RunConfig& c) { return std::string(expr ? "true" : "false"); }}
#define DT_PATH(name, expr)                                                                               \
  r[name] = {[](RunConfig& c, const std::string& v, const fs::path& base) {                               \
               if (v.empty()) bad_value(name, "a path", v);                                               \
               expr = fs::path(v).is_absolute() ? fs::path(v) : (base / v).lexically_normal();            \
             },                                                                                           \
             [](const RunConfig& c) { return expr.string(); }}

const Registry& registry() {
  static const Registry reg = [] {
    Registry r;
    r["seed"] = {[](RunConfig& c, const std::string& v, const fs::path&) { c.seed = to_size("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }};
    DT_PATH("paths.data", c.data_dir);
    DT_PATH("paths.ckpt", c.ckpt_dir);
    DT_PATH("paths.out", c.out_dir);
    DT_SIZE("data.frames", c.frames);
    DT_SIZE("data.image_size", c.image_size);
    DT_DOUBLE("data.audio_noise", c.audio_noise);
    DT_SIZE("split.train_begin", c.train_begin);
    DT_SIZE("split.train_end", c.train_end);
    DT_SIZE("split.test_begin", c.test_begin);
    DT_SIZE("split.test_end", c.test_end);
    DT_SIZE("schedule.T", c.synthesis.diffusion_steps);
    DT_DOUBLE("schedule.beta_start", c.synthesis.beta_start);
    DT_DOUBLE("schedule.beta_end", c.synthesis.beta_end);
    DT_SIZE("completion.d_model", c.completion.d_model);
    DT_SIZE("completion.layers", c.completion.layers);
    DT_SIZE("completion.ffn_hidden", c.completion.ffn_hidden);
    DT_SIZE("completion.heads", c.completion.heads);
    DT_SIZE("completion.audio_tokens", c.completion.audio_tokens);
    DT_DOUBLE("completion.offset_bound", c.completion.offset_bound);
    DT_DOUBLE("completion.coord_scale", c.completion.coord_scale);
    DT_BOOL("completion.ablate_am", c.completion.ablate_am);
    DT_SIZE("completion.epochs", c.completion_train.epochs);
    DT_SIZE("completion.batch_size", c.completion_train.batch_size);
    DT_DOUBLE("completion.lr", c.completion_train.lr);
    DT_BOOL("completion.cosine_decay", c.completion_train.cosine_decay);
    DT_DOUBLE("completion.tempo_jitter", c.completion_train.tempo_jitter);
    DT_SIZE("synthesis.latent_channels", c.synthesis.unet.latent_channels);
    DT_SIZE("synthesis.c1", c.synthesis.unet.c1);
    DT_SIZE("synthesis.c2", c.synthesis.unet.c2);
    DT_SIZE("synthesis.time_dim", c.synthesis.unet.time_dim);
    DT_SIZE("synthesis.ctx_dim", c.synthesis.unet.ctx_dim);
    DT_SIZE("synthesis.groups", c.synthesis.unet.groups);
    DT_SIZE("synthesis.heads", c.synthesis.unet.heads);
    DT_SIZE("synthesis.fusion_heads", c.synthesis.fusion_heads);
    DT_SIZE("synthesis.ae.epochs", c.ae_stage.epochs);
    DT_SIZE("synthesis.ae.batch_size", c.ae_stage.batch_size);
    DT_DOUBLE("synthesis.ae.lr", c.ae_stage.lr);
    DT_SIZE("synthesis.base.epochs", c.base_stage.epochs);
    DT_SIZE("synthesis.base.batch_size", c.base_stage.batch_size);
    DT_DOUBLE("synthesis.base.lr", c.base_stage.lr);
    DT_SIZE("synthesis.face.epochs", c.face_stage.epochs);
    DT_SIZE("synthesis.face.batch_size", c.face_stage.batch_size);
    DT_DOUBLE("synthesis.face.lr", c.face_stage.lr);
    DT_SIZE("synthesis.val_limit", c.face_stage.val_limit);
    r["sample.frames"] = {[](RunConfig& c, const std::string& v, const fs::path&) {
                            try {
                              c.sample_frames = parse_frame_range(v);
                            } catch (const ValidationError&) {
                              bad_value("sample.frames", "a range A..B", v);
                            }
                          },
                          [](const RunConfig& c) {
                            return std::to_string(c.sample_frames.begin) + ".." + std::to_string(c.sample_frames.end);
                          }};
    return r;
  }();
  return reg;
}

#undef DT_SIZE
#undef DT_DOUBLE
#undef DT_BOOL
#undef DT_PATH

void finish_defaults(RunConfig& c, const fs::path& base) {
  for (auto* p : {&c.data_dir, &c.ckpt_dir, &c.out_dir}) {
    if (!p->is_absolute()) *p = (base / *p).lexically_normal();
  }
}

// per-stage fields that are not separate keys follow the split and the seed
void derive_stage_fields(RunConfig& c) {
  for (auto* s : {&c.ae_stage, &c.base_stage, &c.face_stage}) {
    s->train_begin = c.train_begin;
    s->train_end = c.train_end;
    s->val_begin = c.test_begin;
    s->val_end = c.test_end;
    s->val_limit = c.face_stage.val_limit;
  }
  c.ae_stage.seed = c.seed ^ 0xAE;
  c.base_stage.seed = c.seed ^ 0xBA5E;
  c.face_stage.seed = c.seed ^ 0xFACE;
  c.completion_train.seed = c.seed;
  c.completion_train.train_begin = c.train_begin;
  c.completion_train.train_end = c.train_end;
  c.synthesis.image_size = c.image_size;
}

void set_defaults(RunConfig& c) {
  c.ae_stage.epochs = 10;
  c.ae_stage.lr = 2e-3;
  c.ae_stage.batch_size = 16;
  c.base_stage.epochs = 30;
  c.base_stage.lr = 1e-3;
  c.base_stage.batch_size = 16;
  c.face_stage.epochs = 60;
  c.face_stage.lr = 1e-4;
  c.face_stage.batch_size = 8;
  c.face_stage.val_limit = 64;
}

Dataset require_dataset(const RunConfig& cfg, bool with_images) {
  if (!fs::exists(cfg.data_dir / "params.txt")) {
    throw StageError("no dataset at " + cfg.data_dir.string() + ": run gen-data first");
  }
  Dataset ds = load_dataset(cfg.data_dir, with_images);
  if (ds.size() < cfg.frames) {
    throw ValidationError("dataset at " + cfg.data_dir.string() + " has " + std::to_string(ds.size()) +
                          " frames but data.frames = " + std::to_string(cfg.frames));
  }
  return ds;
}

void require_file(const fs::path& file, const std::string& command) {
  if (!fs::exists(file)) throw StageError("missing checkpoint " + file.string() + ": run " + command + " first");
}

void write_loss_file(const fs::path& file, const std::vector<double>& train, const std::vector<double>& val,
                     const std::string& trailer) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << (val.empty() ? "# epoch train_loss\n" : "# epoch train_loss val_loss\n");
  for (std::size_t e = 0; e < train.size(); ++e) {
    os << e << ' ' << fmt_double(train[e]);
    if (e < val.size()) os << ' ' << fmt_double(val[e]);
    os << '\n';
  }
  if (!trailer.empty()) os << trailer << '\n';
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void mark(GrayImage& img, std::size_t x_off, const Landmark68& lm, std::size_t w, std::size_t h) {
  const auto px = denormalize(lm, static_cast<double>(w), static_cast<double>(h));
  for (const auto& p : px) {
    const long x = std::lround(p.x - 0.5), y = std::lround(p.y - 0.5);
    if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) continue;
    img.at(x_off + static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = 255.0;
  }
}

}  // namespace

void refresh_derived(RunConfig& cfg) { derive_stage_fields(cfg); }

FrameRange parse_frame_range(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) throw ValidationError("frame range must look like A..B, got '" + text + "'");
  const std::string a = trim(text.substr(0, dots)), b = trim(text.substr(dots + 2));
  FrameRange r{to_size("frames", a), to_size("frames", b)};
  if (r.begin >= r.end) throw ValidationError("frame range " + text + " is empty");
  return r;
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& [name, key] : registry()) os << name << " = " << key.get(*this) << '\n';
  return os.str();
}

RunConfig default_config(const fs::path& base_dir) {
  RunConfig c;
  set_defaults(c);
  finish_defaults(c, base_dir.empty() ? fs::current_path() : base_dir);
  derive_stage_fields(c);
  return c;
}

RunConfig parse_config(const std::string& text, const fs::path& base_dir) {
  const fs::path base = base_dir.empty() ? fs::current_path() : base_dir;
  RunConfig c = default_config(base);
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    const auto it = registry().find(key);
    if (it == registry().end()) {
      throw ValidationError("unknown config key '" + key + "' (line " + std::to_string(lineno) + ")");
    }
    it->second.set(c, value, base);
  }
  derive_stage_fields(c);
  return c;
}

RunConfig load_config(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw ValidationError("cannot read config file " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), fs::absolute(file).parent_path());
}

void validate(const RunConfig& c) {
  const auto need = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw ValidationError("config key '" + key + "': " + why);
  };
  const std::pair<const char*, double> lrs[] = {{"completion.lr", c.completion_train.lr},
                                                {"synthesis.ae.lr", c.ae_stage.lr},
                                                {"synthesis.base.lr", c.base_stage.lr},
                                                {"synthesis.face.lr", c.face_stage.lr}};
  for (const auto& [key, lr] : lrs) need(lr > 0.0, key, "learning rate must be > 0, got " + fmt_double(lr));
  const std::pair<const char*, std::size_t> batches[] = {{"completion.batch_size", c.completion_train.batch_size},
                                                         {"synthesis.ae.batch_size", c.ae_stage.batch_size},
                                                         {"synthesis.base.batch_size", c.base_stage.batch_size},
                                                         {"synthesis.face.batch_size", c.face_stage.batch_size}};
  for (const auto& [key, b] : batches) need(b > 0, key, "must be > 0");
  need(c.frames > 0, "data.frames", "must be > 0");
  need(c.image_size >= 16 && c.image_size % 16 == 0, "data.image_size", "must be a positive multiple of 16");
  need(c.audio_noise >= 0.0, "data.audio_noise", "must be >= 0");
  need(c.train_begin < c.train_end, "split.train_end", "must exceed split.train_begin");
  need(c.train_end <= c.frames, "split.train_end", "exceeds data.frames");
  need(c.test_begin < c.test_end, "split.test_end", "must exceed split.test_begin");
  need(c.test_end <= c.frames, "split.test_end", "exceeds data.frames");
  need(c.sample_frames.end <= c.frames, "sample.frames", "exceeds data.frames");
  need(c.synthesis.diffusion_steps > 0, "schedule.T", "must be > 0");
  need(c.synthesis.beta_start > 0.0 && c.synthesis.beta_start < 1.0, "schedule.beta_start", "must lie in (0, 1)");
  need(c.synthesis.beta_end >= c.synthesis.beta_start && c.synthesis.beta_end < 1.0, "schedule.beta_end",
       "must lie in [beta_start, 1)");
  need(c.completion.d_model > 0 && c.completion.heads > 0 && c.completion.d_model % c.completion.heads == 0,
       "completion.d_model", "must be a positive multiple of completion.heads");
  need(c.completion.layers > 0, "completion.layers", "must be > 0");
  need(c.completion_train.tempo_jitter >= 0.0 && c.completion_train.tempo_jitter <= 1.0, "completion.tempo_jitter",
       "must lie in [0, 1]");
  need(c.completion.audio_tokens > 0, "completion.audio_tokens", "must be > 0");
  need(c.completion.offset_bound > 0.0, "completion.offset_bound", "must be > 0");
  need(c.completion.coord_scale > 0.0, "completion.coord_scale", "must be > 0");
  const auto& u = c.synthesis.unet;
  need(u.latent_channels > 0, "synthesis.latent_channels", "must be > 0");
  need(u.groups > 0 && u.c1 % u.groups == 0 && u.c2 % u.groups == 0, "synthesis.groups",
       "must divide synthesis.c1 and synthesis.c2");
  need(u.heads > 0 && u.c1 % u.heads == 0 && u.c2 % u.heads == 0, "synthesis.heads",
       "must divide synthesis.c1 and synthesis.c2");
  need(c.synthesis.fusion_heads > 0 && u.c1 % c.synthesis.fusion_heads == 0 && u.c2 % c.synthesis.fusion_heads == 0,
       "synthesis.fusion_heads", "must divide synthesis.c1 and synthesis.c2");
  need(u.time_dim > 0 && u.time_dim % 2 == 0, "synthesis.time_dim", "must be positive and even");
  need(u.ctx_dim > 0, "synthesis.ctx_dim", "must be > 0");
  need(c.face_stage.val_limit > 0, "synthesis.val_limit", "must be > 0");
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
  fs::create_directories(dir);
  const fs::path file = dir / ("manifest." + command + ".txt");
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << "command " << command << '\n';
  os << "seed " << cfg.seed << '\n';
  os << "version " << kVersion << " eigen " << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.'
     << EIGEN_MINOR_VERSION << '\n';
  std::istringstream echo(cfg.echo());
  std::string line;
  while (std::getline(echo, line)) os << "config " << line << '\n';
}

fs::path completion_checkpoint(const RunConfig& cfg) {
  return cfg.ckpt_dir / (cfg.completion.ablate_am ? "completion_ablate.ckpt" : "completion.ckpt");
}

fs::path synthesis_checkpoint(const RunConfig& cfg, const std::string& stage) {
  return cfg.ckpt_dir / ("synth_" + stage + ".ckpt");
}

Dataset cmd_gen_data(const RunConfig& cfg) {
  validate(cfg);
  Dataset ds = generate_dataset(cfg.frames, cfg.seed, cfg.image_size, cfg.audio_noise);
  write_dataset(ds, cfg.data_dir);
  write_manifest(cfg.data_dir, "gen-data", cfg);
  return ds;
}

LandmarkTrainSummary cmd_train_landmarks(const RunConfig& cfg) {
  validate(cfg);
  const Dataset ds = require_dataset(cfg, false);
  const auto t0 = std::chrono::steady_clock::now();
  CompletionModel model(cfg.completion, cfg.seed);
  LandmarkTrainSummary s;
  s.train = train_completion(model, ds, cfg.completion_train);
  s.heldout_ld = heldout_distance(model, ds, cfg.test_begin, cfg.test_end);
  s.seconds = elapsed(t0);

  fs::create_directories(cfg.ckpt_dir);
  const fs::path ckpt = completion_checkpoint(cfg);
  save_checkpoint(model.params(), ckpt);
  fs::path loss = ckpt;
  loss.replace_extension().concat("_loss.txt");
  write_loss_file(loss, s.train.epoch_loss, {}, "# heldout_LD " + fmt_double(s.heldout_ld));
  write_manifest(cfg.ckpt_dir, cfg.completion.ablate_am ? "train-landmarks-ablate" : "train-landmarks", cfg);
  return s;
}

std::unique_ptr<CompletionModel> load_completion(const RunConfig& cfg) {
  const fs::path ckpt = completion_checkpoint(cfg);
  require_file(ckpt, cfg.completion.ablate_am ? "train-landmarks --ablate-am" : "train-landmarks");
  auto model = std::make_unique<CompletionModel>(cfg.completion, cfg.seed);
  load_checkpoint(model->params(), ckpt);
  return model;
}

FaceTrainSummary cmd_train_face(const RunConfig& cfg) {
  validate(cfg);
  const Dataset ds = require_dataset(cfg, true);
  const auto t0 = std::chrono::steady_clock::now();
  FaceSynthesizer fs_model(cfg.synthesis, cfg.seed);
  ParamStore& store = fs_model.params();
  fs::create_directories(cfg.ckpt_dir);
  FaceTrainSummary s;

  // a retrained stage invalidates every later one
  bool retrained = false;
  const auto resume = [&](const std::string& stage, const std::string& prefix) {
    const fs::path file = synthesis_checkpoint(cfg, stage);
    if (retrained || !fs::exists(file)) return false;
    load_checkpoint(store, file, prefix);
    store.set_trainable(prefix, false);
    return true;
  };
  const auto save = [&](const std::string& stage, const std::string& prefix, const StageResult& r) {
    save_checkpoint(store, synthesis_checkpoint(cfg, stage), prefix);
    write_loss_file(cfg.ckpt_dir / ("synth_" + stage + "_loss.txt"), r.train_loss, r.val_loss, {});
    retrained = true;
  };

  if (!(s.ae_resumed = resume("ae", "synth.ae"))) {
    s.ae = fs_model.pretrain_autoencoder(ds, cfg.ae_stage);
    save("ae", "synth.ae", s.ae);
  }
  s.ae_heldout_mse = fs_model.reconstruction_mse(ds, cfg.test_begin, cfg.test_end);
  if (!(s.base_resumed = resume("base", "synth.base"))) {
    s.base = fs_model.pretrain_base(ds, cfg.base_stage);
    save("base", "synth.base", s.base);
  }
  s.base_checksum_before = store.checksum("synth.base");
  if (!(s.face_resumed = resume("lmenc", "synth.lmenc"))) {
    s.face = fs_model.train_synthesis(ds, ds.landmarks, cfg.face_stage);
    save("lmenc", "synth.lmenc", s.face);
  }
  s.base_checksum_after = store.checksum("synth.base");
  s.seconds = elapsed(t0);
  write_manifest(cfg.ckpt_dir, "train-face", cfg);
  return s;
}

std::unique_ptr<FaceSynthesizer> load_synthesizer(const RunConfig& cfg) {
  auto model = std::make_unique<FaceSynthesizer>(cfg.synthesis, cfg.seed);
  for (const auto& [stage, prefix] : {std::pair{"ae", "synth.ae"}, {"base", "synth.base"}, {"lmenc", "synth.lmenc"}}) {
    const fs::path file = synthesis_checkpoint(cfg, stage);
    require_file(file, "train-face");
    load_checkpoint(model->params(), file, prefix);
    model->params().set_trainable(prefix, false);
  }
  return model;
}

GrayImage landmark_overlay(const GrayImage& generated, const Landmark68& predicted, const GrayImage& truth,
                           const Landmark68& truth_lm) {
  if (!generated.same_shape(truth)) throw ValidationError("overlay images differ in shape");
  const std::size_t w = generated.width, h = generated.height;
  GrayImage out(2 * w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      out.at(x, y) = generated.at(x, y);
      out.at(w + x, y) = truth.at(x, y);
    }
  mark(out, 0, predicted, w, h);
  mark(out, w, truth_lm, w, h);
  return out;
}

void cmd_sample(const RunConfig& cfg, const FaceObserver& observer) {
  validate(cfg);
  const auto model = load_completion(cfg);
  const auto synth = load_synthesizer(cfg);
  const Dataset ds = require_dataset(cfg, true);
  if (cfg.sample_frames.end > ds.size()) {
    throw ValidationError("config key 'sample.frames': range ends past the dataset (" + std::to_string(ds.size()) +
                          " frames)");
  }
  fs::remove_all(cfg.out_dir / "images");
  fs::remove_all(cfg.out_dir / "overlays");
  fs::create_directories(cfg.out_dir / "images");
  fs::create_directories(cfg.out_dir / "overlays");
  std::vector<LandmarkFrame> completed;
  for (std::size_t f = cfg.sample_frames.begin; f < cfg.sample_frames.end; ++f) {
    const auto upper = split(ds.landmarks[f]).upper;
    const Landmark68 lm = model->complete(upper, window(ds.audio, f));
    const GeneratedFace face = synth->generate_face(ds.images[f], lm, cfg.seed ^ f);
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.pgm", f);
    write_pgm(cfg.out_dir / "images" / name, face.image);
    write_pgm(cfg.out_dir / "overlays" / name, landmark_overlay(face.image, lm, ds.images[f], ds.landmarks[f]));
    completed.push_back({static_cast<long>(f), lm});
    if (observer) observer(f, ds.images[f], lm, face);
  }
  save_landmark_file(cfg.out_dir / "landmarks.txt", completed);
  write_manifest(cfg.out_dir, "sample", cfg);
}

EvalReport cmd_eval(const RunConfig& cfg) {
  validate(cfg);
  if (!fs::exists(cfg.out_dir / "landmarks.txt")) {
    throw StageError("no samples under " + cfg.out_dir.string() + ": run sample first");
  }
  require_dataset(cfg, false);
  EvalReport report = evaluate(cfg.out_dir, cfg.data_dir);
  report.seed = cfg.seed;
  report.config_echo = cfg.echo();
  write_report(cfg.out_dir / "report.txt", report);
  write_manifest(cfg.out_dir, "eval", cfg);
  return report;
}

}  // namespace difftalk
