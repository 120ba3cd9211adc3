#include "difftalk/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

constexpr double kPi = std::numbers::pi;

struct Box {
  double x0, y0, x1, y1;
  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

Box bounds(const std::vector<Point>& pts, double pad) {
  Box b{pts[0].x, pts[0].y, pts[0].x, pts[0].y};
  for (const auto& p : pts) {
    b.x0 = std::min(b.x0, p.x);
    b.y0 = std::min(b.y0, p.y);
    b.x1 = std::max(b.x1, p.x);
    b.y1 = std::max(b.y1, p.y);
  }
  b.x0 -= pad;
  b.y0 -= pad;
  b.x1 += pad;
  b.y1 += pad;
  return b;
}

struct Polygon {
  std::vector<Point> pts;
  double level;
  Box box;

  bool covers(double x, double y) const {
    if (!box.contains(x, y)) return false;
    bool inside = false;
    for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
      const Point& a = pts[i];
      const Point& b = pts[j];
      if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) inside = !inside;
    }
    return inside;
  }
};

struct Polyline {
  std::vector<Point> pts;
  double half_width;
  double level;
  Box box;

  bool covers(double x, double y) const {
    if (!box.contains(x, y)) return false;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const Point& a = pts[i];
      const Point& b = pts[i + 1];
      const double dx = b.x - a.x, dy = b.y - a.y;
      const double len2 = dx * dx + dy * dy;
      double t = len2 > 0.0 ? ((x - a.x) * dx + (y - a.y) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = a.x + t * dx - x, ey = a.y + t * dy - y;
      if (ex * ex + ey * ey <= half_width * half_width) return true;
    }
    return false;
  }
};

struct Scene {
  FaceParams p;
  std::vector<Polyline> lines;
  std::vector<Polygon> fills;  // painted after lines

  double sample(double x, double y) const {
    double level = kBackgroundLevel;
    const double u = (y - p.cy) / p.ry;
    const double dx = (x - p.cx - p.yaw * std::max(u, 0.0)) / p.rx;
    if (dx * dx + u * u <= 1.0) level = kSkinLevel;
    for (const auto& l : lines) {
      if (l.covers(x, y)) level = l.level;
    }
    for (const auto& f : fills) {
      if (f.covers(x, y)) level = f.level;
    }
    return level;
  }
};

std::vector<Point> pick(const Landmark68& lm, std::size_t first, std::size_t last) {
  return std::vector<Point>(lm.points.begin() + static_cast<long>(first),
                            lm.points.begin() + static_cast<long>(last) + 1);
}

Scene build_scene(const FaceParams& p) {
  const Landmark68 lm = landmarks_from_params(p);
  Scene s{p, {}, {}};
  const auto line = [&](std::vector<Point> pts, double hw, double level) {
    Box b = bounds(pts, hw);
    s.lines.push_back({std::move(pts), hw, level, b});
  };
  const auto fill = [&](std::vector<Point> pts, double level) {
    Box b = bounds(pts, 0.0);
    s.fills.push_back({std::move(pts), level, b});
  };
  line(pick(lm, 17, 21), 0.011, 70.0);
  line(pick(lm, 22, 26), 0.011, 70.0);
  line(pick(lm, 27, 30), 0.0075, 140.0);
  line(pick(lm, 31, 35), 0.009, 120.0);
  fill(pick(lm, 36, 41), 40.0);
  fill(pick(lm, 42, 47), 40.0);
  fill(pick(lm, 48, 59), 110.0);
  fill(pick(lm, 60, 67), 25.0);
  return s;
}

double mean_revert(double x, const ParamRange& r, double theta, double sigma_frac, Rng& rng) {
  std::normal_distribution<double> normal;
  const double mid = 0.5 * (r.lo + r.hi), width = r.hi - r.lo;
  x += theta * (mid - x) + sigma_frac * width * normal(rng);
  return std::clamp(x, r.lo, r.hi);
}

double uniform_in(const ParamRange& r, Rng& rng) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

void check_range(const char* name, double v, const ParamRange& r) {
  if (!(v >= r.lo && v <= r.hi)) {
    std::ostringstream os;
    os << "face parameter " << name << " = " << v << " outside [" << r.lo << ", " << r.hi << "]";
    throw ValidationError(os.str());
  }
}

}  // namespace

void validate(const FaceParams& p) {
  const auto& r = kFaceRanges;
  check_range("cx", p.cx, r.cx);
  check_range("cy", p.cy, r.cy);
  check_range("rx", p.rx, r.rx);
  check_range("ry", p.ry, r.ry);
  check_range("yaw", p.yaw, r.yaw);
  check_range("eye", p.eye, r.eye);
  check_range("mouth", p.mouth, r.mouth);
}

Landmark68 landmarks_from_params(const FaceParams& p) {
  Landmark68 lm;
  auto& pt = lm.points;
  for (std::size_t k = 0; k <= 16; ++k) {
    const double a = kPi * static_cast<double>(k) / 16.0;
    const double u = std::sin(a);
    pt[k] = {p.cx - p.rx * std::cos(a) + p.yaw * u, p.cy + p.ry * u};
  }
  const double fx = p.cx + p.yaw;
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    // brows
    const double bx = fx + sign * 0.40 * p.rx, by = p.cy - 0.42 * p.ry;
    for (std::size_t i = 0; i < 5; ++i) {
      const double t = (static_cast<double>(i) - 2.0) / 2.0;
      pt[17 + 5 * side + i] = {bx + 0.22 * p.rx * t, by - 0.05 * p.ry * (1.0 - t * t)};
    }
    // eyes: corner, two upper, corner, two lower
    const double ex = fx + sign * 0.40 * p.rx, ey = p.cy - 0.22 * p.ry;
    const double ew = 0.16 * p.rx, eh = 0.07 * p.ry * p.eye;
    const std::size_t e0 = 36 + 6 * static_cast<std::size_t>(side);
    pt[e0 + 0] = {ex - ew, ey};
    pt[e0 + 1] = {ex - ew / 3.0, ey - eh};
    pt[e0 + 2] = {ex + ew / 3.0, ey - eh};
    pt[e0 + 3] = {ex + ew, ey};
    pt[e0 + 4] = {ex + ew / 3.0, ey + eh};
    pt[e0 + 5] = {ex - ew / 3.0, ey + eh};
  }
  // nose bridge and nostrils
  const Point top{fx, p.cy - 0.20 * p.ry}, tip{p.cx + 1.3 * p.yaw, p.cy + 0.08 * p.ry};
  for (std::size_t i = 0; i < 4; ++i) {
    const double t = static_cast<double>(i) / 3.0;
    pt[27 + i] = {top.x + t * (tip.x - top.x), top.y + t * (tip.y - top.y)};
  }
  const double nx = p.cx + 1.2 * p.yaw;
  constexpr double kNostrilX[5] = {-0.12, -0.06, 0.0, 0.06, 0.12};
  constexpr double kNostrilY[5] = {0.10, 0.115, 0.12, 0.115, 0.10};
  for (std::size_t i = 0; i < 5; ++i) pt[31 + i] = {nx + kNostrilX[i] * p.rx, p.cy + kNostrilY[i] * p.ry};

  // mouth
  const double mx = fx, my = p.cy + kMouthDrop * p.ry;
  const double w = kMouthHalfWidth * p.rx, t = kLipThickness * p.ry;
  const double half_gap = 0.5 * kInnerGapScale * p.mouth * p.ry;
  constexpr double kOuterX[12] = {-1.0, -0.6, -0.25, 0.0, 0.25, 0.6, 1.0, 0.6, 0.25, 0.0, -0.25, -0.6};
  constexpr double kOuterT[12] = {0.0, -0.8, -1.0, -0.85, -1.0, -0.8, 0.0, 0.9, 1.1, 1.2, 1.1, 0.9};
  for (std::size_t i = 0; i < 12; ++i) {
    const double gap = kOuterT[i] < 0.0 ? -half_gap : (kOuterT[i] > 0.0 ? half_gap : 0.0);
    pt[48 + i] = {mx + kOuterX[i] * w, my + gap + kOuterT[i] * t};
  }
  constexpr double kInnerX[8] = {-0.75, -0.35, 0.0, 0.35, 0.75, 0.35, 0.0, -0.35};
  constexpr double kInnerSide[8] = {0, -1, -1, -1, 0, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) pt[60 + i] = {mx + kInnerX[i] * w, my + kInnerSide[i] * half_gap};
  return lm;
}

double inner_lip_gap(const Landmark68& lm) {
  const auto& p = lm.points;
  return ((p[67].y - p[61].y) + (p[66].y - p[62].y) + (p[65].y - p[63].y)) / 3.0;
}

GrayImage render(const FaceParams& p, std::size_t size) {
  constexpr int kSub = 4;
  const Scene scene = build_scene(p);
  GrayImage img(size, size);
  const double s = static_cast<double>(size);
  for (std::size_t j = 0; j < size; ++j) {
    for (std::size_t i = 0; i < size; ++i) {
      double acc = 0.0;
      for (int sy = 0; sy < kSub; ++sy) {
        const double y = (static_cast<double>(j) + (sy + 0.5) / kSub) / s;
        for (int sx = 0; sx < kSub; ++sx) {
          const double x = (static_cast<double>(i) + (sx + 0.5) / kSub) / s;
          acc += scene.sample(x, y);
        }
      }
      img.at(i, j) = acc / (kSub * kSub);
    }
  }
  return img;
}

std::uint64_t dataset_audio_seed(std::uint64_t seed) { return seed ^ 0x5eed0a0d10ull; }

Dataset generate_dataset(std::size_t n_frames, std::uint64_t seed, std::size_t image_size,
                         double audio_noise) {
  if (n_frames == 0) throw ValidationError("dataset needs at least one frame");
  Rng rng(seed);
  const auto& r = kFaceRanges;
  FaceParams p;
  p.seed = seed;
  p.cx = uniform_in(r.cx, rng);
  p.cy = uniform_in(r.cy, rng);
  p.rx = uniform_in(r.rx, rng);
  p.ry = uniform_in(r.ry, rng);
  p.yaw = uniform_in(r.yaw, rng);
  p.eye = uniform_in(r.eye, rng);

  std::array<double, 3> freq{}, amp{}, phase{};
  for (std::size_t k = 0; k < 3; ++k) {
    freq[k] = std::uniform_real_distribution<double>(0.02, 0.12)(rng);
    amp[k] = std::uniform_real_distribution<double>(0.15, 0.35)(rng);
    phase[k] = std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(rng);
  }

  Dataset ds;
  ds.seed = seed;
  ds.image_size = image_size;
  std::vector<double> mouth(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    if (i > 0) {
      p.cx = mean_revert(p.cx, r.cx, 0.05, 0.06, rng);
      p.cy = mean_revert(p.cy, r.cy, 0.05, 0.06, rng);
      p.rx = mean_revert(p.rx, r.rx, 0.05, 0.06, rng);
      p.ry = mean_revert(p.ry, r.ry, 0.05, 0.06, rng);
      p.yaw = mean_revert(p.yaw, r.yaw, 0.05, 0.06, rng);
      p.eye = mean_revert(p.eye, r.eye, 0.10, 0.10, rng);
    }
    double m = 0.5;
    for (std::size_t k = 0; k < 3; ++k) {
      m += amp[k] * std::sin(2.0 * kPi * freq[k] * static_cast<double>(i) + phase[k]);
    }
    p.mouth = std::clamp(m, 0.0, 1.0);
    mouth[i] = p.mouth;
    ds.params.push_back(p);
    ds.landmarks.push_back(landmarks_from_params(p));
    ds.images.push_back(quantize8(render(p, image_size)));
  }
  ds.audio = synth_track(mouth, dataset_audio_seed(seed), audio_noise);
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.pgm", i);
    write_pgm(dir / "images" / name, ds.images[i]);
  }
  std::vector<LandmarkFrame> frames;
  for (std::size_t i = 0; i < ds.size(); ++i) frames.push_back({static_cast<long>(i), ds.landmarks[i]});
  save_landmark_file(dir / "landmarks.txt", frames);
  save_audio_file(dir / "audio.txt", ds.audio);

  std::ofstream os(dir / "params.txt", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (dir / "params.txt").string());
  os << "# seed=" << ds.seed << " size=" << ds.image_size << '\n';
  os << "# frame cx cy rx ry yaw eye mouth\n";
  char buf[40];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const FaceParams& p = ds.params[i];
    os << i;
    for (double v : {p.cx, p.cy, p.rx, p.ry, p.yaw, p.eye, p.mouth}) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + (dir / "params.txt").string());
}

Dataset load_dataset(const std::filesystem::path& dir, bool with_images) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError("dataset directory not found: " + dir.string());
  Dataset ds;
  const fs::path params_file = dir / "params.txt";
  std::ifstream is(params_file);
  if (!is) throw ValidationError("cannot open " + params_file.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      unsigned long long seed = 0;
      std::size_t size = 0;
      if (std::sscanf(line.c_str(), "# seed=%llu size=%zu", &seed, &size) == 2) {
        ds.seed = seed;
        ds.image_size = size;
      }
      continue;
    }
    std::istringstream ls(line);
    long frame = 0;
    FaceParams p;
    if (!(ls >> frame >> p.cx >> p.cy >> p.rx >> p.ry >> p.yaw >> p.eye >> p.mouth)) {
      throw ParseError(params_file.string(), line_no, "expected frame and 7 parameters");
    }
    if (frame != static_cast<long>(ds.params.size())) {
      throw ParseError(params_file.string(), line_no, "frame index out of sequence");
    }
    p.seed = ds.seed;
    ds.params.push_back(p);
  }
  for (auto& f : load_landmark_file(dir / "landmarks.txt")) ds.landmarks.push_back(f.landmarks);
  ds.audio = load_audio_file(dir / "audio.txt");
  if (ds.landmarks.size() != ds.size() || ds.audio.size() != ds.size()) {
    throw ValidationError("dataset " + dir.string() + " is inconsistent: " +
                          std::to_string(ds.size()) + " params, " +
                          std::to_string(ds.landmarks.size()) + " landmark frames, " +
                          std::to_string(ds.audio.size()) + " audio frames");
  }
  if (with_images) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%06zu.pgm", i);
      ds.images.push_back(read_pgm(dir / "images" / name));
    }
  }
  return ds;
}

Dataset gen_sequence(std::size_t n_frames, std::uint64_t seed, std::size_t image_size,
                     const std::filesystem::path& dir) {
  Dataset ds = generate_dataset(n_frames, seed, image_size);
  write_dataset(ds, dir);
  return ds;
}

FaceParams fit_params(const GrayImage& img, FitOptions options) {
  if (img.width != img.height) throw ValidationError("fit_params expects a square image");
  const auto& r = kFaceRanges;
  const std::array<ParamRange, 7> ranges = {r.cx, r.cy, r.rx, r.ry, r.yaw, r.eye, r.mouth};
  std::array<double, 7> x{}, step{};
  for (std::size_t k = 0; k < 7; ++k) {
    x[k] = 0.5 * (ranges[k].lo + ranges[k].hi);
    step[k] = 0.25 * (ranges[k].hi - ranges[k].lo);
  }
  const auto to_params = [](const std::array<double, 7>& v) {
    FaceParams p;
    p.cx = v[0];
    p.cy = v[1];
    p.rx = v[2];
    p.ry = v[3];
    p.yaw = v[4];
    p.eye = v[5];
    p.mouth = v[6];
    return p;
  };
  const auto cost = [&](const std::array<double, 7>& v) {
    const GrayImage g = render(to_params(v), img.width);
    double e = 0.0;
    for (std::size_t i = 0; i < g.pixels.size(); ++i) {
      const double d = g.pixels[i] - img.pixels[i];
      e += d * d;
    }
    return e;
  };
  double best = cost(x);
  for (std::size_t round = 0; round < options.max_rounds; ++round) {
    bool any_active = false;
    for (std::size_t k = 0; k < 7; ++k) {
      if (step[k] < options.min_step * (ranges[k].hi - ranges[k].lo)) continue;
      any_active = true;
      bool improved = false;
      for (double dir : {1.0, -1.0}) {
        auto trial = x;
        trial[k] = std::clamp(x[k] + dir * step[k], ranges[k].lo, ranges[k].hi);
        if (trial[k] == x[k]) continue;
        const double c = cost(trial);
        if (c < best) {
          best = c;
          x = trial;
          improved = true;
          break;
        }
      }
      if (!improved) step[k] *= 0.5;
    }
    if (!any_active) break;
  }
  return to_params(x);
}

}  // namespace difftalk
