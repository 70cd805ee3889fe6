#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gigaseg/error.hpp"

namespace gigaseg {

// 8-bit image with interleaved channels: data[(y * width + x) * channels + c].
// Masks are single-channel; 0 is background, anything else foreground.
struct Image8 {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(std::size_t c, std::size_t h, std::size_t w, std::uint8_t fill = 0) : channels(c), height(h), width(w) {
    if (c == 0 || h == 0 || w == 0)
      throw ShapeError("image dims must be >= 1, got " + dims());
    if (h > std::numeric_limits<std::size_t>::max() / w / c)
      throw ShapeError("image dims " + dims() + " overflow");
    data.assign(c * h * w, fill);
  }

  std::size_t pixels() const { return height * width; }
  std::size_t row_bytes() const { return width * channels; }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
  std::uint8_t* row(std::size_t y) { return data.data() + y * row_bytes(); }
  const std::uint8_t* row(std::size_t y) const { return data.data() + y * row_bytes(); }

  std::string dims() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
  friend bool operator==(const Image8&, const Image8&) = default;
};

// Rows [y0, y1) as a standalone image.
inline Image8 crop_rows(const Image8& img, std::size_t y0, std::size_t y1) {
  Image8 out(img.channels, y1 - y0, img.width);
  std::copy(img.row(y0), img.row(y0) + (y1 - y0) * img.row_bytes(), out.data.begin());
  return out;
}

}  // namespace gigaseg
