#pragma once

// Brute-force references for the morphology tests: direct 2D window scans and
// a fixed-point flood fill.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "gigaseg/image.hpp"

namespace oracle {

using gigaseg::Image8;

inline Image8 random_binary(std::size_t h, std::size_t w, double p, std::mt19937_64& rng, std::uint8_t fg = 255) {
  Image8 img(1, h, w);
  std::bernoulli_distribution d(p);
  for (auto& v : img.data) v = d(rng) ? fg : 0;
  return img;
}

inline std::uint8_t px_clamped(const Image8& img, long y, long x) {
  y = std::clamp<long>(y, 0, static_cast<long>(img.height) - 1);
  x = std::clamp<long>(x, 0, static_cast<long>(img.width) - 1);
  return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
}

inline Image8 median(const Image8& src, std::size_t k) {
  const long r = static_cast<long>(k / 2);
  Image8 out(1, src.height, src.width);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x) {
      std::vector<std::uint8_t> v;
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) v.push_back(px_clamped(src, long(y) + dy, long(x) + dx));
      std::sort(v.begin(), v.end());
      out.at(y, x) = v[v.size() / 2];
    }
  return out;
}

// Min (erode) or max (dilate) over the full 2D square, repeated.
inline Image8 morph(const Image8& src, std::size_t size, std::size_t iters, bool is_max) {
  const long r = static_cast<long>(size / 2);
  Image8 cur = src;
  for (std::size_t it = 0; it < iters; ++it) {
    Image8 out(1, cur.height, cur.width);
    for (std::size_t y = 0; y < cur.height; ++y)
      for (std::size_t x = 0; x < cur.width; ++x) {
        std::uint8_t v = cur.at(y, x);
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long yy = long(y) + dy, xx = long(x) + dx;
            if (yy < 0 || xx < 0 || yy >= long(cur.height) || xx >= long(cur.width)) continue;
            v = is_max ? std::max(v, cur.at(yy, xx)) : std::min(v, cur.at(yy, xx));
          }
        out.at(y, x) = v;
      }
    cur = out;
  }
  return cur;
}

// Grows the outside region one sweep at a time until nothing changes.
inline Image8 fill(const Image8& src, std::uint8_t fg = 255) {
  const std::size_t H = src.height, W = src.width;
  std::vector<std::vector<bool>> out(H, std::vector<bool>(W, false));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      out[y][x] = src.at(y, x) == 0 && (y == 0 || x == 0 || y == H - 1 || x == W - 1);
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (out[y][x] || src.at(y, x) != 0) continue;
        if ((y > 0 && out[y - 1][x]) || (y + 1 < H && out[y + 1][x]) || (x > 0 && out[y][x - 1]) ||
            (x + 1 < W && out[y][x + 1])) {
          out[y][x] = true;
          changed = true;
        }
      }
  }
  Image8 res = src;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (src.at(y, x) == 0 && !out[y][x]) res.at(y, x) = fg;
  return res;
}

}  // namespace oracle
