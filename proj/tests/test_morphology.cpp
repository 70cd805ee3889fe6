#include <gtest/gtest.h>

#include <random>

#include "gigaseg/morphology.hpp"
#include "morph_oracles.hpp"

using namespace gigaseg;

namespace {

Image8 complement(Image8 img) {
  for (auto& v : img.data) v = v ? 0 : 255;
  return img;
}

Image8 ring(std::size_t n) {
  Image8 img(1, n, n);
  const double c = (n - 1) / 2.0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double d2 = (y - c) * (y - c) + (x - c) * (x - c);
      if (d2 <= (n / 3.0) * (n / 3.0) && d2 >= (n / 5.0) * (n / 5.0)) img.at(y, x) = 255;
    }
  return img;
}

}  // namespace

TEST(Morphology, OpeningRemovesSpeck) {
  Image8 img(1, 9, 9);
  img.at(4, 4) = 255;
  const Image8 opened = dilate(erode(img, 3, 1), 3, 1);
  for (auto v : opened.data) EXPECT_EQ(v, 0);
}

TEST(Morphology, FillHolesRingBecomesDisk) {
  const Image8 r = ring(41);
  const Image8 filled = fill_holes(r);
  for (std::size_t y = 0; y < 41; ++y)
    for (std::size_t x = 0; x < 41; ++x) {
      const double d2 = (y - 20.0) * (y - 20.0) + (x - 20.0) * (x - 20.0);
      EXPECT_EQ(filled.at(y, x), d2 <= (41 / 3.0) * (41 / 3.0) ? 255 : 0) << y << "," << x;
    }
}

TEST(Morphology, FillHolesLeavesBorderRegions) {
  // A U shape open to the top border: its inside is connected to the outside.
  Image8 img(1, 10, 10);
  for (std::size_t y = 0; y < 8; ++y) img.at(y, 2) = img.at(y, 7) = 255;
  for (std::size_t x = 2; x <= 7; ++x) img.at(7, x) = 255;
  EXPECT_EQ(fill_holes(img), img);
  // Diagonal gaps do not connect under 4-connectivity.
  Image8 d(1, 5, 5);
  d.at(1, 2) = d.at(2, 1) = d.at(2, 3) = d.at(3, 2) = 255;
  EXPECT_EQ(fill_holes(d).at(2, 2), 255);
}

TEST(Morphology, Errors) {
  Image8 img(1, 8, 8);
  EXPECT_THROW(median_blur(img, 4), ConfigError);
  EXPECT_THROW(erode(img, 2), ConfigError);
  EXPECT_THROW(median_blur(Image8(3, 8, 8), 3), ShapeError);
}

TEST(MorphologyOracle, MedianMatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const Image8 img = oracle::random_binary(64, 64, 0.2 + 0.006 * t, rng);
    const std::size_t k = t % 2 ? 5 : 3;
    ASSERT_EQ(median_blur(img, k), oracle::median(img, k)) << t;
  }
  // Non-binary values too.
  Image8 g(1, 16, 20);
  for (auto& v : g.data) v = static_cast<std::uint8_t>(rng());
  EXPECT_EQ(median_blur(g, 7), oracle::median(g, 7));
}

TEST(MorphologyOracle, ErodeDilateMatchBruteForce) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const Image8 img = oracle::random_binary(64, 64, 0.3 + 0.004 * t, rng);
    const std::size_t size = 1 + 2 * (t % 3), iters = 1 + t % 2;
    ASSERT_EQ(erode(img, size, iters), oracle::morph(img, size, iters, false)) << t;
    ASSERT_EQ(dilate(img, size, iters), oracle::morph(img, size, iters, true)) << t;
  }
}

TEST(MorphologyOracle, FillHolesMatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const Image8 img = oracle::random_binary(64, 64, 0.45 + 0.002 * t, rng);
    ASSERT_EQ(fill_holes(img), oracle::fill(img)) << t;
  }
}

TEST(MorphologyProperties, Duality) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const Image8 img = oracle::random_binary(40, 50, 0.5, rng);
    EXPECT_EQ(dilate(complement(img), 3, 2), complement(erode(img, 3, 2)));
    EXPECT_EQ(erode(complement(img), 5, 1), complement(dilate(img, 5, 1)));
  }
}

TEST(MorphologyProperties, BandedEqualsWholeImage) {
  std::mt19937_64 rng(5);
  const Image8 img = oracle::random_binary(97, 61, 0.5, rng);
  for (std::size_t band : {1u, 4u, 7u, 32u, 200u}) {
    EXPECT_EQ(banded(img, band, median_reach(5), [](const Image8& b) { return median_blur(b, 5); }),
              median_blur(img, 5));
    EXPECT_EQ(banded(img, band, morph_reach(3, 2), [](const Image8& b) { return erode(b, 3, 2); }),
              erode(img, 3, 2));
    EXPECT_EQ(banded(img, band, morph_reach(3, 2), [](const Image8& b) { return dilate(b, 3, 2); }),
              dilate(img, 3, 2));
  }
  // Too small a halo shows at band seams.
  const Image8 sparse = oracle::random_binary(97, 61, 0.03, rng);
  EXPECT_NE(banded(sparse, 8, 0, [](const Image8& b) { return dilate(b, 3, 2); }), dilate(sparse, 3, 2));
}

TEST(MorphologyProperties, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(6);
  const Image8 img = oracle::random_binary(80, 70, 0.5, rng);
  const ExecPolicy four{4, true};
  EXPECT_EQ(median_blur(img, 5, four), median_blur(img, 5));
  EXPECT_EQ(erode(img, 3, 2, four), erode(img, 3, 2));
  EXPECT_EQ(dilate(img, 3, 2, four), dilate(img, 3, 2));
}
