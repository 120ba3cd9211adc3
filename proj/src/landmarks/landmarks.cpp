#include "difftalk/landmarks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "difftalk/errors.hpp"

namespace difftalk {

namespace {

std::vector<std::size_t> index_range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> out;
  for (std::size_t i = first; i <= last; ++i) out.push_back(i);
  return out;
}

RegionPartition build_standard() {
  RegionPartition p;
  p.upper_input = index_range(0, 3);
  const auto stubs = index_range(13, 16);
  const auto face = index_range(17, 47);
  p.upper_input.insert(p.upper_input.end(), stubs.begin(), stubs.end());
  p.upper_input.insert(p.upper_input.end(), face.begin(), face.end());
  p.lower_contour = index_range(4, 12);
  p.mouth = index_range(48, 67);
  p.validate();
  return p;
}

std::vector<Point> gather(const Landmark68& lm, const std::vector<std::size_t>& idx) {
  std::vector<Point> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(lm.points[i]);
  return out;
}

}  // namespace

bool Landmark68::in_unit_square() const {
  return std::all_of(points.begin(), points.end(), [](const Point& p) {
    return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0;
  });
}

const RegionPartition& RegionPartition::standard() {
  static const RegionPartition part = build_standard();
  return part;
}

void RegionPartition::validate() const {
  std::array<int, kNumLandmarks> hits{};
  for (const auto* set : {&upper_input, &lower_contour, &mouth}) {
    for (auto i : *set) {
      if (i >= kNumLandmarks) throw std::logic_error("partition index out of range: " + std::to_string(i));
      ++hits[i];
    }
  }
  for (std::size_t i = 0; i < kNumLandmarks; ++i) {
    if (hits[i] != 1) {
      throw std::logic_error("partition covers index " + std::to_string(i) + " " +
                             std::to_string(hits[i]) + " times");
    }
  }
}

std::vector<std::size_t> RegionPartition::predicted() const {
  std::vector<std::size_t> out = lower_contour;
  out.insert(out.end(), mouth.begin(), mouth.end());
  return out;
}

Landmark68 normalize(std::span<const Point> points_px, double width, double height) {
  if (!(width > 0.0) || !(height > 0.0)) throw ValidationError("image dimensions must be positive");
  if (points_px.size() != kNumLandmarks) {
    throw ValidationError("expected 68 points, got " + std::to_string(points_px.size()));
  }
  Landmark68 lm;
  for (std::size_t i = 0; i < kNumLandmarks; ++i) {
    const Point& p = points_px[i];
    if (!(p.x >= 0.0 && p.x <= width && p.y >= 0.0 && p.y <= height)) {
      std::ostringstream os;
      os << "landmark " << i << " (" << p.x << ", " << p.y << ") outside " << width << "x" << height;
      throw ValidationError(os.str());
    }
    lm.points[i] = {p.x / width, p.y / height};
  }
  return lm;
}

std::array<Point, kNumLandmarks> denormalize(const Landmark68& lm, double width, double height) {
  std::array<Point, kNumLandmarks> out;
  for (std::size_t i = 0; i < kNumLandmarks; ++i) {
    out[i] = {lm.points[i].x * width, lm.points[i].y * height};
  }
  return out;
}

SplitLandmarks split(const Landmark68& lm, const RegionPartition& part) {
  return {gather(lm, part.upper_input), gather(lm, part.lower_contour), gather(lm, part.mouth)};
}

Landmark68 merge(const SplitLandmarks& parts, const RegionPartition& part) {
  if (parts.upper.size() != part.upper_input.size() ||
      parts.lower_contour.size() != part.lower_contour.size() ||
      parts.mouth.size() != part.mouth.size()) {
    throw ValidationError("merge: region sizes do not match the partition");
  }
  Landmark68 lm;
  for (std::size_t i = 0; i < parts.upper.size(); ++i) lm.points[part.upper_input[i]] = parts.upper[i];
  for (std::size_t i = 0; i < parts.lower_contour.size(); ++i) {
    lm.points[part.lower_contour[i]] = parts.lower_contour[i];
  }
  for (std::size_t i = 0; i < parts.mouth.size(); ++i) lm.points[part.mouth[i]] = parts.mouth[i];
  return lm;
}

GrayImage rasterize(const Landmark68& lm, std::size_t size) {
  if (size < 16) throw ValidationError("raster size must be at least 16");
  GrayImage img(size, size);
  const double s = static_cast<double>(size);
  for (const Point& p : lm.points) {
    const double px = p.x * s, py = p.y * s;
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    const double fx = px - fx0, fy = py - fy0;
    const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
    const double wx[2] = {1.0 - fx, fx}, wy[2] = {1.0 - fy, fy};
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const double w = wx[dx] * wy[dy];
        const long x = x0 + dx, y = y0 + dy;
        if (w == 0.0 || x < 0 || y < 0 || x >= static_cast<long>(size) || y >= static_cast<long>(size)) {
          continue;
        }
        img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) += w;
      }
    }
  }
  return img;
}

void save_landmark_file(const std::filesystem::path& file, std::span<const LandmarkFrame> frames) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write landmark file: " + file.string());
  os << "# frame_index x0 y0 ... x67 y67 (normalized)\n";
  char buf[32];
  for (const auto& f : frames) {
    os << f.frame;
    for (const Point& p : f.landmarks.points) {
      std::snprintf(buf, sizeof buf, " %.9f", p.x);
      os << buf;
      std::snprintf(buf, sizeof buf, " %.9f", p.y);
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + file.string());
}

std::vector<LandmarkFrame> load_landmark_file(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ValidationError("cannot open landmark file: " + file.string());
  std::vector<LandmarkFrame> frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    LandmarkFrame f;
    if (!(ls >> f.frame)) throw ParseError(file.string(), line_no, "missing frame index");
    std::vector<double> values;
    double v;
    while (ls >> v) values.push_back(v);
    if (!ls.eof()) throw ParseError(file.string(), line_no, "non-numeric token");
    if (values.size() != 2 * kNumLandmarks) {
      throw ParseError(file.string(), line_no,
                       "expected 68 points, found " + std::to_string(values.size() / 2) +
                           (values.size() % 2 ? " and a dangling coordinate" : ""));
    }
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
      f.landmarks.points[i] = {values[2 * i], values[2 * i + 1]};
    }
    frames.push_back(f);
  }
  return frames;
}

}  // namespace difftalk
