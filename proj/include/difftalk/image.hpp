#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace difftalk {

/// Single-channel image, row-major. 8-bit content is held as doubles in [0, 255].
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0)
      : width(w), height(h), pixels(w * h, fill) {}

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  bool same_shape(const GrayImage& o) const { return width == o.width && height == o.height; }
  bool operator==(const GrayImage&) const = default;
};

/// Round and clamp to the 8-bit grid.
GrayImage quantize8(const GrayImage& img);

/// Binary portable graymap (P5), maxval 255.
void write_pgm(const std::filesystem::path& file, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& file);

}  // namespace difftalk
