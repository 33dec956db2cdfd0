#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace promptpar {

// Interleaved 8-bit raster, row-major, `channels` values per pixel.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int w, int h, int c = 3, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return width == 0 || height == 0; }
  bool operator==(const Image&) const = default;
};

// Lossless raster I/O; format chosen from the extension (.png, .ppm, .pgm, ...).
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& image);

}  // namespace promptpar
