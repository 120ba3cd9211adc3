#include "difftalk/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "difftalk/errors.hpp"

namespace difftalk {

GrayImage quantize8(const GrayImage& img) {
  GrayImage out = img;
  for (auto& p : out.pixels) p = std::clamp(std::round(p), 0.0, 255.0);
  return out;
}

void write_pgm(const std::filesystem::path& file, const GrayImage& img) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write image: " + file.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::clamp(std::round(img.pixels[i]), 0.0, 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + file.string());
}

GrayImage read_pgm(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ValidationError("cannot open image: " + file.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic;
  const auto skip_comments = [&is] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> w;
  skip_comments();
  is >> h;
  skip_comments();
  is >> maxval;
  if (magic != "P5" || !is || w == 0 || h == 0 || maxval != 255) {
    throw ValidationError("unsupported PGM header in " + file.string());
  }
  is.get();
  std::vector<unsigned char> bytes(w * h);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw ValidationError("truncated PGM data in " + file.string());
  }
  GrayImage img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i];
  return img;
}

}  // namespace difftalk
