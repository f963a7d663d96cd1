#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cqlab;

TEST(Colour, HsvRoundTripRecoversRgb)
{
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const RGB p{u(rng), u(rng), u(rng)};
    const RGB q = hsv_to_rgb(rgb_to_hsv(p));
    EXPECT_NEAR(p.r, q.r, 1e-12);
    EXPECT_NEAR(p.g, q.g, 1e-12);
    EXPECT_NEAR(p.b, q.b, 1e-12);
  }
}

TEST(Colour, PrimaryHues)
{
  EXPECT_NEAR(rgb_to_hsv(RGB{1, 0, 0}).h, 0.0, 1e-15);
  EXPECT_NEAR(rgb_to_hsv(RGB{0, 1, 0}).h, kTwoPi / 3, 1e-12);
  EXPECT_NEAR(rgb_to_hsv(RGB{0, 0, 1}).h, 2 * kTwoPi / 3, 1e-12);
  const auto grey = rgb_to_hsv(RGB{0.4, 0.4, 0.4});
  EXPECT_EQ(grey.s, 0.0);
  EXPECT_EQ(grey.h, 0.0);
  EXPECT_DOUBLE_EQ(grey.v, 0.4);
}

TEST(Colour, WrapAngleStaysInRange)
{
  for (double h : {-100.0, -kTwoPi, -1e-18, 0.0, kTwoPi, 7.5, 1e6}) {
    const double w = wrap_angle(h);
    EXPECT_GE(w, 0.0);
    EXPECT_LT(w, kTwoPi);
  }
}

// The squared HSV distance is the Euclidean distance between cone points.
TEST(Colour, SquaredDistanceIsConeEuclidean)
{
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const HSVPixel a{u(rng) * kTwoPi, u(rng), u(rng)}, b{u(rng) * kTwoPi, u(rng), u(rng)};
    const double xa = a.s * a.v * std::cos(a.h), ya = a.s * a.v * std::sin(a.h);
    const double xb = b.s * b.v * std::cos(b.h), yb = b.s * b.v * std::sin(b.h);
    const double want = (xa - xb) * (xa - xb) + (ya - yb) * (ya - yb) + (a.v - b.v) * (a.v - b.v);
    EXPECT_NEAR(hsv_squared_distance(a, b), want, 1e-12);
    EXPECT_NEAR(hsv_squared_distance(a, b), hsv_squared_distance(b, a), 1e-15);
    EXPECT_GE(hsv_squared_distance(a, b), 0.0);
  }
  EXPECT_EQ(hsv_squared_distance({1.0, 0.5, 0.5}, {1.0, 0.5, 0.5}), 0.0);
}

TEST(Colour, ConeRoundTrip)
{
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int i = 0; i < 500; ++i) {
    const HSVPixel p{u(rng) * 6.0, u(rng), u(rng)};
    const HSVPixel q = cone_to_hsv(hsv_to_cone(p));
    EXPECT_NEAR(p.h, q.h, 1e-9);
    EXPECT_NEAR(p.s, q.s, 1e-9);
    EXPECT_NEAR(p.v, q.v, 1e-12);
  }
}

TEST(Colour, ChipCentresMatchGrid)
{
  EXPECT_NEAR(WCSGrid::hue_center(0), std::numbers::pi / 40, 1e-15);
  EXPECT_NEAR(WCSGrid::hue_center(39), 79 * std::numbers::pi / 40, 1e-15);
  EXPECT_DOUBLE_EQ(WCSGrid::value_center(0), 1.0 / 16);
  EXPECT_DOUBLE_EQ(WCSGrid::value_center(7), 15.0 / 16);
  for (int i = 0; i < WCSGrid::kChips; ++i) EXPECT_EQ(WCSGrid::index(WCSGrid::chip(i)), i);
}

// Brute force over all 320 chip centres.
TEST(Colour, PixelToChipIsNearestCentre)
{
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 3000; ++i) {
    const HSVPixel p{u(rng) * kTwoPi, u(rng), u(rng)};
    int best_col = 0, best_row = 0;
    double bh = 1e9, bv = 1e9;
    for (int c = 0; c < WCSGrid::kCols; ++c) {
      const double d = circular_distance(p.h, WCSGrid::hue_center(c));
      if (d < bh) bh = d, best_col = c;
    }
    for (int r = 0; r < WCSGrid::kRows; ++r) {
      const double d = std::abs(p.v - WCSGrid::value_center(r));
      if (d < bv) bv = d, best_row = r;
    }
    const Chip got = pixel_to_chip(p);
    EXPECT_EQ(got.col, best_col) << p.h;
    EXPECT_EQ(got.row, best_row) << p.v;
  }
}

TEST(Colour, PixelToChipTiesGoLow)
{
  // exactly between value centres 0 and 1, and between hue columns 0 and 1
  const Chip c = pixel_to_chip({2 * std::numbers::pi / 40, 1.0, 0.125});
  EXPECT_EQ(c.row, 0);
  EXPECT_EQ(c.col, 0);
}

TEST(Colour, ImageRejectsOutOfRangeValues)
{
  EXPECT_THROW(RGBImage(1, 1, std::vector<double>{0.5, 1.5, 0.0}), InputError);
  EXPECT_THROW(RGBImage(0, 3), InputError);
}
