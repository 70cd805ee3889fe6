#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gigaseg/error.hpp"
#include "gigaseg/image.hpp"
#include "gigaseg/morphology.hpp"
#include "gigaseg/parallel.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

// Parameters of the tissue-mask chain. The "1x1 tile" threshold is applied per
// pixel of the downsampled image, to the mean of its channels unless
// threshold_on_gray is set.
struct LabelRecipe {
  std::size_t downsample_factor = 8;
  int background_threshold = 230;
  bool threshold_on_gray = false;
  std::size_t median_kernel = 5;
  std::size_t morph_size = 3;
  std::size_t erode_iterations = 2;
  std::size_t dilate_iterations = 2;
  std::size_t band_rows = 0;  // 0: whole image at once

  void validate() const {
    if (downsample_factor < 1) throw ConfigError("label.downsample_factor must be >= 1");
    if (background_threshold < 0 || background_threshold > 255)
      throw ConfigError("label.background_threshold must be in [0, 255], got " +
                        std::to_string(background_threshold));
    if (median_kernel < 3 || median_kernel % 2 == 0)
      throw ConfigError("label.median_kernel must be odd and >= 3, got " + std::to_string(median_kernel));
    if (morph_size < 1 || morph_size % 2 == 0)
      throw ConfigError("label.morph_size must be odd and >= 1, got " + std::to_string(morph_size));
  }
};

// Integer luma with round-half-up: round(0.299 R + 0.587 G + 0.114 B).
inline std::uint8_t gray8(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>((299u * r + 587u * g + 114u * b + 500u) / 1000u);
}

inline std::uint8_t gray_at(const std::uint8_t* px, std::size_t channels) {
  return channels >= 3 ? gray8(px[0], px[1], px[2]) : px[0];
}

// Block means over factor x factor tiles, rounded half up.
inline Image8 downsample_area(const Image8& src, std::size_t factor) {
  if (factor == 0 || src.height % factor || src.width % factor)
    throw ShapeError("image " + src.dims() + " is not divisible by the downsample factor " +
                     std::to_string(factor));
  const std::size_t C = src.channels, oh = src.height / factor, ow = src.width / factor;
  const std::size_t n = factor * factor;
  Image8 out(C, oh, ow);
  std::vector<std::uint32_t> acc(ow * C);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    std::fill(acc.begin(), acc.end(), 0u);
    for (std::size_t y = oy * factor; y < (oy + 1) * factor; ++y) {
      const std::uint8_t* s = src.row(y);
      for (std::size_t x = 0; x < src.width; ++x)
        for (std::size_t c = 0; c < C; ++c) acc[(x / factor) * C + c] += s[x * C + c];
    }
    std::uint8_t* d = out.row(oy);
    for (std::size_t i = 0; i < ow * C; ++i) d[i] = static_cast<std::uint8_t>((acc[i] + n / 2) / n);
  }
  return out;
}

// Background threshold, grayscale and non-zero -> 255 on the downsampled image.
inline Image8 tissue_seed(const Image8& small, const LabelRecipe& r) {
  const std::size_t C = small.channels;
  Image8 out(1, small.height, small.width);
  for (std::size_t i = 0; i < small.pixels(); ++i) {
    const std::uint8_t* px = small.data.data() + i * C;
    std::uint8_t g;
    if (r.threshold_on_gray) {
      g = gray_at(px, C);
      if (g > r.background_threshold) g = 0;
    } else {
      unsigned sum = 0;
      for (std::size_t c = 0; c < C; ++c) sum += px[c];
      // mean > t  <=>  sum > t * C, exact in integers.
      g = sum > static_cast<unsigned>(r.background_threshold) * C ? 0 : gray_at(px, C);
    }
    out.data[i] = g ? 255 : 0;
  }
  return out;
}

// Median, erosion, dilation and hole filling on the downsampled seed.
inline Image8 clean_mask(const Image8& seed, const LabelRecipe& r, const ExecPolicy& policy = {}) {
  auto med = [&](const Image8& im) { return median_blur(im, r.median_kernel, policy); };
  auto ero = [&](const Image8& im) { return erode(im, r.morph_size, r.erode_iterations, policy); };
  auto dil = [&](const Image8& im) { return dilate(im, r.morph_size, r.dilate_iterations, policy); };
  Image8 m;
  if (r.band_rows == 0) {
    m = dil(ero(med(seed)));
  } else {
    m = banded(seed, r.band_rows, median_reach(r.median_kernel), med);
    m = banded(m, r.band_rows, morph_reach(r.morph_size, r.erode_iterations), ero);
    m = banded(m, r.band_rows, morph_reach(r.morph_size, r.dilate_iterations), dil);
  }
  return fill_holes(m, 255);
}

// One full-resolution output row: nearest upsample, > 0 -> 255, then {0, 1}.
inline void upsample_row(const Image8& small, std::size_t y, std::size_t factor, std::uint8_t* out) {
  const std::uint8_t* s = small.row(y / factor);
  for (std::size_t x = 0; x < small.width * factor; ++x) {
    const std::uint8_t v = s[x / factor] > 0 ? 255 : 0;
    out[x] = v == 255 ? 1 : 0;
  }
}

// Binary {0, 1} tissue mask with the crop's height and width.
inline Image8 generate_label(const Image8& rgb, const LabelRecipe& r, const ExecPolicy& policy = {}) {
  r.validate();
  const Image8 small = clean_mask(tissue_seed(downsample_area(rgb, r.downsample_factor), r), r, policy);
  Image8 out(1, rgb.height, rgb.width);
  for (std::size_t y = 0; y < rgb.height; ++y) upsample_row(small, y, r.downsample_factor, out.row(y));
  return out;
}

// Same chain for images that do not fit in memory. read_rows(y0, n) returns
// rows [y0, y0 + n) of the source; write_row(y, data) receives each mask row
// in order. Peak memory is one block row of the source plus the downsampled
// image.
inline void generate_label_streamed(std::size_t channels, std::size_t height, std::size_t width,
                                    const std::function<Image8(std::size_t, std::size_t)>& read_rows,
                                    const std::function<void(std::size_t, const std::uint8_t*)>& write_row,
                                    const LabelRecipe& r, const ExecPolicy& policy = {}) {
  r.validate();
  const std::size_t f = r.downsample_factor;
  if (height % f || width % f)
    throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by the downsample factor " + std::to_string(f));
  Image8 small(channels, height / f, width / f);
  for (std::size_t oy = 0; oy < small.height; ++oy) {
    const Image8 band = read_rows(oy * f, f);
    if (band.channels != channels || band.width != width || band.height != f)
      throw ShapeError("band reader returned " + band.dims() + ", expected " + std::to_string(channels) + "x" +
                       std::to_string(f) + "x" + std::to_string(width));
    const Image8 d = downsample_area(band, f);
    std::copy(d.data.begin(), d.data.end(), small.row(oy));
  }
  const Image8 mask = clean_mask(tissue_seed(small, r), r, policy);
  std::vector<std::uint8_t> row(width);
  for (std::size_t y = 0; y < height; ++y) {
    upsample_row(mask, y, f, row.data());
    write_row(y, row.data());
  }
}

// Inverted luma scaled to [0, 1]: (255 - (0.299 R + 0.587 G + 0.114 B)) / 255.
inline float preprocess_pixel(const std::uint8_t* px, std::size_t channels) {
  const double luma = channels >= 3 ? 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2] : double(px[0]);
  return static_cast<float>((255.0 - luma) / 255.0);
}

inline void preprocess_row(const std::uint8_t* row, std::size_t channels, std::size_t width, float* out) {
  for (std::size_t x = 0; x < width; ++x) out[x] = preprocess_pixel(row + x * channels, channels);
}

// Model input: top-left crop_h x crop_w of the preprocessed image, 1x1xHxW.
inline Tensor<float> preprocess_input(const Image8& img, std::size_t crop_h, std::size_t crop_w) {
  if (img.height < crop_h || img.width < crop_w)
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is smaller than the crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w));
  Tensor<float> t(Shape{1, 1, crop_h, crop_w});
  for (std::size_t y = 0; y < crop_h; ++y) preprocess_row(img.row(y), img.channels, crop_w, t.data() + y * crop_w);
  return t;
}

inline Tensor<float> preprocess_input(const Image8& img) { return preprocess_input(img, img.height, img.width); }

inline Image8 crop_top_left(const Image8& img, std::size_t h, std::size_t w) {
  if (img.height < h || img.width < w)
    throw ShapeError("image " + img.dims() + " is smaller than the crop " + std::to_string(h) + "x" +
                     std::to_string(w));
  Image8 out(img.channels, h, w);
  for (std::size_t y = 0; y < h; ++y) std::copy(img.row(y), img.row(y) + w * img.channels, out.row(y));
  return out;
}

// Binary mask {0, 1} as a float target.
inline Tensor<float> mask_to_tensor(const Image8& mask) {
  Tensor<float> t(Shape{1, 1, mask.height, mask.width});
  for (std::size_t i = 0; i < mask.pixels(); ++i) t[i] = mask.data[i] ? 1.0f : 0.0f;
  return t;
}

// ---- synthetic slides ----------------------------------------------------

// Blob radii are fractions of the image height.
struct SynthParams {
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 4;
  double min_radius = 0.16;
  double max_radius = 0.43;
  double irregularity = 0.25;
  int background_lo = 235;
  int background_hi = 255;
  int tissue_lo = 60;
  int tissue_hi = 200;

  void validate() const {
    if (min_blobs > max_blobs) throw ConfigError("synth.min_blobs > synth.max_blobs");
    if (!(min_radius > 0.0) || min_radius > max_radius)
      throw ConfigError("synth radii must satisfy 0 < min_radius <= max_radius");
    if (irregularity < 0.0 || irregularity >= 1.0) throw ConfigError("synth.irregularity must be in [0, 1)");
    if (background_lo < 0 || background_hi > 255 || background_lo > background_hi)
      throw ConfigError("synth background range must be inside [0, 255]");
    if (tissue_lo < 0 || tissue_hi > 255 || tissue_lo > tissue_hi)
      throw ConfigError("synth tissue range must be inside [0, 255]");
  }
};

struct SynthSample {
  Image8 image;  // RGB
  Image8 mask;   // {0, 1}
};

inline SynthSample synth_generate(std::uint64_t seed, std::size_t height, std::size_t width,
                                  const SynthParams& p = {}) {
  p.validate();
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto uint = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

  SynthSample s{Image8(3, height, width), Image8(1, height, width)};
  for (auto& v : s.image.data) v = static_cast<std::uint8_t>(uint(p.background_lo, p.background_hi));

  struct Blob {
    double cy, cx, radius;
    double amp[4], phase[4];
    double rgb[3];
  };
  const std::size_t count =
      static_cast<std::size_t>(uint(static_cast<int>(p.min_blobs), static_cast<int>(p.max_blobs)));
  std::vector<Blob> blobs(count);
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  for (auto& b : blobs) {
    b.radius = uni(p.min_radius, p.max_radius) * H;
    b.cy = uni(0.0, H);
    b.cx = uni(0.0, W);
    for (int k = 0; k < 4; ++k) {
      b.amp[k] = uni(0.0, p.irregularity / (k + 2));
      b.phase[k] = uni(0.0, 2.0 * std::numbers::pi);
    }
    // Between hematoxylin purple and eosin pink.
    const double t = uni(0.0, 1.0);
    const double purple[3] = {110, 70, 150}, pink[3] = {195, 105, 165};
    for (int c = 0; c < 3; ++c) b.rgb[c] = purple[c] + t * (pink[c] - purple[c]);
  }

  for (const auto& b : blobs) {
    double reach = b.radius;
    for (double a : b.amp) reach += a * b.radius;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.cy - reach)));
    const auto y1 = static_cast<std::size_t>(std::clamp(std::ceil(b.cy + reach), 0.0, H));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.cx - reach)));
    const auto x1 = static_cast<std::size_t>(std::clamp(std::ceil(b.cx + reach), 0.0, W));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        const double dy = y + 0.5 - b.cy, dx = x + 0.5 - b.cx;
        const double theta = std::atan2(dy, dx);
        double r = 1.0;
        for (int k = 0; k < 4; ++k) r += b.amp[k] * std::cos((k + 2) * theta + b.phase[k]);
        if (dy * dy + dx * dx >= (r * b.radius) * (r * b.radius)) continue;
        s.mask.at(y, x) = 1;
        const int shade = uint(-30, 30);
        for (int c = 0; c < 3; ++c)
          s.image.at(y, x, c) =
              static_cast<std::uint8_t>(std::clamp(static_cast<int>(b.rgb[c]) + shade, p.tissue_lo, p.tissue_hi));
      }
  }
  return s;
}

// ---- dataset layout ----------------------------------------------------------

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

// <root>/<split>/images/NNNN.ppm, labels/NNNN.pgm, reference/NNNN.pgm.
struct DatasetSpec {
  std::string root = "data";
  std::size_t train = 64;
  std::size_t val = 4;
  std::size_t test = 16;
  std::size_t height = 512;
  std::size_t width = 2048;

  std::size_t count(Split s) const { return s == Split::Train ? train : s == Split::Val ? val : test; }

  void validate(std::size_t composite_stride = 1) const {
    if (height == 0 || width == 0) throw ConfigError("dataset.height and dataset.width must be >= 1");
    if (composite_stride > 1 && (height % composite_stride || width % composite_stride))
      throw ConfigError("dataset crop " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by the model stride " + std::to_string(composite_stride));
  }

  std::filesystem::path dir(Split s, const char* kind) const {
    return std::filesystem::path(root) / split_name(s) / kind;
  }
  static std::string stem(std::size_t i) {
    std::string n = std::to_string(i);
    return std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
  }
  std::filesystem::path image(Split s, std::size_t i) const { return dir(s, "images") / (stem(i) + ".ppm"); }
  std::filesystem::path label(Split s, std::size_t i) const { return dir(s, "labels") / (stem(i) + ".pgm"); }
  std::filesystem::path reference(Split s, std::size_t i) const {
    return dir(s, "reference") / (stem(i) + ".pgm");
  }
};

// Per-image generator seed, mixed from (base, split, index).
inline std::uint64_t synth_seed(std::uint64_t base, Split s, std::size_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (1 + static_cast<std::uint64_t>(s) * 1000003ull + index);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace gigaseg
