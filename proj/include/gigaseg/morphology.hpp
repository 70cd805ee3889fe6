#pragma once

// Windowed operations on single-channel 8-bit images. Pixels outside the image
// take the value of the nearest edge pixel. With a square window that is the
// same as ignoring them for min/max, which is how erode and dilate run.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gigaseg/error.hpp"
#include "gigaseg/image.hpp"
#include "gigaseg/parallel.hpp"

namespace gigaseg {

namespace detail {

inline void require_gray(const Image8& img, const char* op) {
  if (img.channels != 1)
    throw ShapeError(std::string(op) + " needs a single-channel image, got " + img.dims());
}

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return 0;
  if (static_cast<std::size_t>(i) >= n) return n - 1;
  return static_cast<std::size_t>(i);
}

// One min (or max) pass of a (2r+1)-square window, done as a row pass then a
// column pass.
template <typename Pick>
Image8 square_filter(const Image8& src, std::size_t r, Pick pick, const ExecPolicy& policy) {
  const std::size_t H = src.height, W = src.width;
  Image8 tmp(1, H, W), out(1, H, W);
  parallel_for(H, policy, [&](std::size_t y0, std::size_t y1, std::size_t) {
    for (std::size_t y = y0; y < y1; ++y) {
      const std::uint8_t* s = src.row(y);
      std::uint8_t* d = tmp.row(y);
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t a = x >= r ? x - r : 0, b = std::min(W - 1, x + r);
        std::uint8_t v = s[a];
        for (std::size_t i = a + 1; i <= b; ++i) v = pick(v, s[i]);
        d[x] = v;
      }
    }
  });
  parallel_for(H, policy, [&](std::size_t y0, std::size_t y1, std::size_t) {
    for (std::size_t y = y0; y < y1; ++y) {
      const std::size_t a = y >= r ? y - r : 0, b = std::min(H - 1, y + r);
      std::uint8_t* d = out.row(y);
      std::copy(tmp.row(a), tmp.row(a) + W, d);
      for (std::size_t j = a + 1; j <= b; ++j) {
        const std::uint8_t* s = tmp.row(j);
        for (std::size_t x = 0; x < W; ++x) d[x] = pick(d[x], s[x]);
      }
    }
  });
  return out;
}

inline void check_se(std::size_t size) {
  if (size == 0 || size % 2 == 0)
    throw ConfigError("structuring element size must be odd and >= 1, got " + std::to_string(size));
}

}  // namespace detail

// Median over a kernel x kernel window.
inline Image8 median_blur(const Image8& src, std::size_t kernel, const ExecPolicy& policy = {}) {
  detail::require_gray(src, "median_blur");
  if (kernel == 0 || kernel % 2 == 0)
    throw ConfigError("median kernel must be odd, got " + std::to_string(kernel));
  const std::size_t H = src.height, W = src.width;
  const auto r = static_cast<std::ptrdiff_t>(kernel / 2);
  Image8 out(1, H, W);
  parallel_for(H, policy, [&](std::size_t y0, std::size_t y1, std::size_t) {
    std::vector<std::uint8_t> win(kernel * kernel);
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t n = 0;
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
          const std::uint8_t* s = src.row(detail::clamp_index(static_cast<std::ptrdiff_t>(y) + dy, H));
          for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
            win[n++] = s[detail::clamp_index(static_cast<std::ptrdiff_t>(x) + dx, W)];
        }
        std::nth_element(win.begin(), win.begin() + n / 2, win.end());
        out.at(y, x) = win[n / 2];
      }
    }
  });
  return out;
}

// Minimum over a size x size square, applied `iterations` times.
inline Image8 erode(const Image8& src, std::size_t size, std::size_t iterations = 1,
                    const ExecPolicy& policy = {}) {
  detail::require_gray(src, "erode");
  detail::check_se(size);
  Image8 cur = src;
  for (std::size_t i = 0; i < iterations; ++i)
    cur = detail::square_filter(cur, size / 2, [](std::uint8_t a, std::uint8_t b) { return std::min(a, b); },
                                policy);
  return cur;
}

inline Image8 dilate(const Image8& src, std::size_t size, std::size_t iterations = 1,
                     const ExecPolicy& policy = {}) {
  detail::require_gray(src, "dilate");
  detail::check_se(size);
  Image8 cur = src;
  for (std::size_t i = 0; i < iterations; ++i)
    cur = detail::square_filter(cur, size / 2, [](std::uint8_t a, std::uint8_t b) { return std::max(a, b); },
                                policy);
  return cur;
}

// Background pixels that cannot reach the border through 4-connected
// background become `fill`.
inline Image8 fill_holes(const Image8& src, std::uint8_t fill = 255) {
  detail::require_gray(src, "fill_holes");
  const std::size_t H = src.height, W = src.width;
  std::vector<std::uint8_t> outside(H * W, 0);
  std::vector<std::size_t> stack;
  auto seed = [&](std::size_t y, std::size_t x) {
    const std::size_t i = y * W + x;
    if (src.data[i] == 0 && !outside[i]) {
      outside[i] = 1;
      stack.push_back(i);
    }
  };
  for (std::size_t x = 0; x < W; ++x) {
    seed(0, x);
    seed(H - 1, x);
  }
  for (std::size_t y = 0; y < H; ++y) {
    seed(y, 0);
    seed(y, W - 1);
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const std::size_t y = i / W, x = i % W;
    if (y > 0) seed(y - 1, x);
    if (y + 1 < H) seed(y + 1, x);
    if (x > 0) seed(y, x - 1);
    if (x + 1 < W) seed(y, x + 1);
  }
  Image8 out = src;
  for (std::size_t i = 0; i < H * W; ++i)
    if (src.data[i] == 0 && !outside[i]) out.data[i] = fill;
  return out;
}

// Runs a windowed op band by band. Each band is cut out with `halo` extra rows
// on both sides (fewer at the image edges), processed on its own, and only its
// own rows are kept. Equals op(whole image) whenever halo covers the op's
// vertical reach.
inline Image8 banded(const Image8& src, std::size_t band_rows, std::size_t halo,
                     const std::function<Image8(const Image8&)>& op) {
  if (band_rows == 0) throw ConfigError("band_rows must be >= 1");
  Image8 out(src.channels, src.height, src.width);
  for (std::size_t y0 = 0; y0 < src.height; y0 += band_rows) {
    const std::size_t y1 = std::min(src.height, y0 + band_rows);
    const std::size_t a = y0 >= halo ? y0 - halo : 0;
    const std::size_t b = std::min(src.height, y1 + halo);
    const Image8 res = op(crop_rows(src, a, b));
    std::copy(res.row(y0 - a), res.row(y1 - a), out.row(y0));
  }
  return out;
}

// Vertical reach of each op, for use as the halo.
inline std::size_t median_reach(std::size_t kernel) { return kernel / 2; }
inline std::size_t morph_reach(std::size_t size, std::size_t iterations) { return size / 2 * iterations; }

}  // namespace gigaseg
