#include "difftalk/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

void check_shapes(const GrayImage& a, const GrayImage& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ValidationError(std::string(what) + ": image shapes differ (" + std::to_string(a.width) + "x" +
                          std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                          std::to_string(b.height) + ")");
  }
}

std::array<double, 11> gaussian_window() {
  std::array<double, 11> g{};
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

std::string format_value(double v) {
  if (std::isinf(v) && v > 0) return "inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::map<long, std::filesystem::path> list_frames(const std::filesystem::path& dir) {
  std::map<long, std::filesystem::path> frames;
  if (!std::filesystem::is_directory(dir)) return frames;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".pgm") continue;
    const std::string stem = e.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) continue;
    frames.emplace(std::stol(stem), e.path());
  }
  return frames;
}

std::map<long, Landmark68> landmark_map(const std::filesystem::path& file) {
  std::map<long, Landmark68> out;
  for (const auto& f : load_landmark_file(file)) out[f.frame] = f.landmarks;
  return out;
}

}  // namespace

double landmark_distance(const Landmark68& pred, const Landmark68& gt,
                         std::span<const std::size_t> subset) {
  const auto r = RegionPartition::standard().predicted();
  const std::span<const std::size_t> idx = subset.empty() ? std::span<const std::size_t>(r) : subset;
  double sum = 0.0;
  for (auto i : idx) {
    if (i >= kNumLandmarks) throw ValidationError("landmark index out of range: " + std::to_string(i));
    sum += std::hypot(pred.points[i].x - gt.points[i].x, pred.points[i].y - gt.points[i].y);
  }
  return sum / static_cast<double>(idx.size());
}

double psnr(const GrayImage& a, const GrayImage& b, double max_val) {
  check_shapes(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  if (se == 0.0) return kPsnrIdentical;
  const double mse = se / static_cast<double>(a.pixels.size());
  return 10.0 * std::log10(max_val * max_val / mse);
}

double ssim(const GrayImage& a, const GrayImage& b) {
  check_shapes(a, b, "ssim");
  if (a.width < 11 || a.height < 11) throw ValidationError("ssim needs images of at least 11x11");
  static const auto g = gaussian_window();
  constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y0 = 0; y0 + 11 <= a.height; ++y0) {
    for (std::size_t x0 = 0; x0 + 11 <= a.width; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t j = 0; j < 11; ++j) {
        for (std::size_t i = 0; i < 11; ++i) {
          const double w = g[j] * g[i];
          const double va = a.at(x0 + i, y0 + j), vb = b.at(x0 + i, y0 + j);
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

void EvalReport::recompute_means() {
  mean_ld = mean_psnr = mean_ssim = 0.0;
  if (frames.empty()) return;
  for (const auto& f : frames) {
    mean_ld += f.ld;
    mean_psnr += f.psnr;
    mean_ssim += f.ssim;
  }
  const double n = static_cast<double>(frames.size());
  mean_ld /= n;
  mean_psnr /= n;
  mean_ssim /= n;
}

EvalReport evaluate(const std::filesystem::path& run_dir, const std::filesystem::path& gt_dir) {
  const auto run_images = list_frames(run_dir / "images");
  if (run_images.empty()) throw ValidationError("no frames found under " + (run_dir / "images").string());
  const auto gt_images = list_frames(gt_dir / "images");
  const auto run_lm = landmark_map(run_dir / "landmarks.txt");
  const auto gt_lm = landmark_map(gt_dir / "landmarks.txt");

  std::vector<long> missing_gt, missing_run_lm;
  for (const auto& [frame, path] : run_images) {
    if (!gt_images.count(frame) || !gt_lm.count(frame)) missing_gt.push_back(frame);
    if (!run_lm.count(frame)) missing_run_lm.push_back(frame);
  }
  const auto list = [](const std::vector<long>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    return os.str();
  };
  if (!missing_gt.empty()) {
    throw ValidationError("ground truth lacks frames: " + list(missing_gt));
  }
  if (!missing_run_lm.empty()) {
    throw ValidationError("run landmarks lack frames: " + list(missing_run_lm));
  }

  EvalReport report;
  for (const auto& [frame, path] : run_images) {
    const GrayImage out = read_pgm(path);
    const GrayImage gt = read_pgm(gt_images.at(frame));
    report.frames.push_back({frame, landmark_distance(run_lm.at(frame), gt_lm.at(frame)), psnr(out, gt), ssim(out, gt)});
  }
  report.recompute_means();
  return report;
}

void write_report(const std::filesystem::path& file, const EvalReport& report) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write report " + file.string());
  os << "# frame LD PSNR SSIM\n";
  for (const auto& f : report.frames) {
    os << f.frame << ' ' << format_value(f.ld) << ' ' << format_value(f.psnr) << ' '
       << format_value(f.ssim) << '\n';
  }
  os << "# aggregate\n";
  os << "frames " << report.frames.size() << '\n';
  os << "mean_LD " << format_value(report.mean_ld) << '\n';
  os << "mean_PSNR " << format_value(report.mean_psnr) << '\n';
  os << "mean_SSIM " << format_value(report.mean_ssim) << '\n';
  os << "seed " << report.seed << '\n';
  if (!report.config_echo.empty()) {
    std::istringstream cfg(report.config_echo);
    std::string line;
    while (std::getline(cfg, line)) os << "config " << line << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + file.string());
}

}  // namespace difftalk
