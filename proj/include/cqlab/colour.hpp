#pragma once

// Colour-space helpers: RGB images, hexcone HSV, the cone embedding under
// which the HSV squared distance is Euclidean, and the 8 x 40 WCS grid.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "cqlab/common.hpp"

namespace cqlab {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct RGB {
  double r = 0, g = 0, b = 0;
  friend bool operator==(const RGB&, const RGB&) = default;
};

// H x W x 3 image, channels interleaved, values in [0, 1].
class RGBImage {
 public:
  RGBImage() = default;
  RGBImage(int height, int width, double fill = 0.0) : height_(height), width_(width)
  {
    if (height < 1 || width < 1) throw InputError("RGBImage: dimensions must be positive");
    data_.assign(static_cast<std::size_t>(height) * width * 3, fill);
  }
  RGBImage(int height, int width, std::vector<double> data)
      : height_(height), width_(width), data_(std::move(data))
  {
    if (height < 1 || width < 1) throw InputError("RGBImage: dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(height) * width * 3)
      throw InputError("RGBImage: data size does not match dimensions");
    for (double v : data_)
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("RGBImage: channel value outside [0,1]");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height_) * width_; }

  double& operator()(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }
  double operator()(int y, int x, int c) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }

  RGB pixel(std::size_t i) const { return {data_[3 * i], data_[3 * i + 1], data_[3 * i + 2]}; }
  RGB pixel(int y, int x) const { return pixel(static_cast<std::size_t>(y) * width_ + x); }
  void set_pixel(std::size_t i, RGB p)
  {
    data_[3 * i] = p.r;
    data_[3 * i + 1] = p.g;
    data_[3 * i + 2] = p.b;
  }
  void set_pixel(int y, int x, RGB p) { set_pixel(static_cast<std::size_t>(y) * width_ + x, p); }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  friend bool operator==(const RGBImage&, const RGBImage&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

struct HSVPixel {
  double h = 0;  // radians, [0, 2pi)
  double s = 0;
  double v = 0;
};

inline double wrap_angle(double h)
{
  h = std::fmod(h, kTwoPi);
  if (h < 0) h += kTwoPi;
  if (h >= kTwoPi) h = 0;
  return h;
}

inline HSVPixel make_hsv(double h, double s, double v)
{
  return {wrap_angle(h), std::clamp(s, 0.0, 1.0), std::clamp(v, 0.0, 1.0)};
}

// Hexcone RGB -> HSV. Achromatic pixels get hue 0.
inline HSVPixel rgb_to_hsv(RGB p)
{
  const double mx = std::max({p.r, p.g, p.b});
  const double mn = std::min({p.r, p.g, p.b});
  const double delta = mx - mn;
  HSVPixel out;
  out.v = mx;
  out.s = mx > 0 ? delta / mx : 0.0;
  if (delta <= 0) return out;
  double sector;
  if (mx == p.r)
    sector = (p.g - p.b) / delta;
  else if (mx == p.g)
    sector = 2.0 + (p.b - p.r) / delta;
  else
    sector = 4.0 + (p.r - p.g) / delta;
  out.h = wrap_angle(sector * std::numbers::pi / 3.0);
  return out;
}

inline RGB hsv_to_rgb(HSVPixel p)
{
  const double c = p.v * p.s;
  const double hp = wrap_angle(p.h) / (std::numbers::pi / 3.0);
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = p.v - c;
  return {r + m, g + m, b + m};
}

inline std::vector<HSVPixel> rgb_to_hsv(const RGBImage& img)
{
  std::vector<HSVPixel> out(img.pixel_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rgb_to_hsv(img.pixel(i));
  return out;
}

using Cone = std::array<double, 3>;

// (s v cos h, s v sin h, v)
inline Cone hsv_to_cone(HSVPixel p)
{
  const double r = p.s * p.v;
  return {r * std::cos(p.h), r * std::sin(p.h), p.v};
}

inline HSVPixel cone_to_hsv(const Cone& z)
{
  const double v = z[2];
  const double r = std::hypot(z[0], z[1]);
  HSVPixel out;
  out.v = v;
  out.s = v > 0 ? r / v : 0.0;
  out.h = r > 0 ? wrap_angle(std::atan2(z[1], z[0])) : 0.0;
  return out;
}

// Munsell-HSV squared distance (hexcone proxy).
inline double hsv_squared_distance(HSVPixel a, HSVPixel b)
{
  const double dv = b.v - a.v;
  const double d = dv * dv + a.s * a.s * a.v * a.v + b.s * b.s * b.v * b.v -
                   2.0 * a.s * b.s * a.v * b.v * std::cos(b.h - a.h);
  return std::max(d, 0.0);
}

inline double squared_distance(const Cone& a, const Cone& b)
{
  double s = 0;
  for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// ------------------------------------------------------------------ WCS grid

struct Chip {
  int row = 0;  // value level, 0 darkest .. 7 lightest
  int col = 0;  // hue level
  friend bool operator==(const Chip&, const Chip&) = default;
};

struct WCSGrid {
  static constexpr int kRows = 8;
  static constexpr int kCols = 40;
  static constexpr int kChips = kRows * kCols;

  static double hue_center(int col) { return (2 * col + 1) * std::numbers::pi / kCols; }
  static double value_center(int row) { return (2 * row + 1) / (2.0 * kRows); }
  static int index(Chip c) { return c.row * kCols + c.col; }
  static Chip chip(int index) { return {index / kCols, index % kCols}; }
};

inline double circular_distance(double a, double b)
{
  const double d = std::abs(wrap_angle(a) - wrap_angle(b));
  return std::min(d, kTwoPi - d);
}

// Nearest chip centre in (hue, value); hue is circular, saturation ignored.
// Ties resolve to the lower column, then the lower row.
inline Chip pixel_to_chip(HSVPixel p)
{
  constexpr double hue_step = kTwoPi / WCSGrid::kCols;
  const double h = wrap_angle(p.h);
  int col = static_cast<int>(std::floor(h / hue_step));
  col = std::clamp(col, 0, WCSGrid::kCols - 1);
  // Bin k spans [k*step, (k+1)*step) so its centre is nearest, except exactly
  // on a boundary where the lower-column neighbour wins the tie.
  int best_col = col;
  double best = circular_distance(h, WCSGrid::hue_center(col));
  for (int dc : {-1, 1}) {
    const int c = (col + dc + WCSGrid::kCols) % WCSGrid::kCols;
    const double d = circular_distance(h, WCSGrid::hue_center(c));
    if (d < best || (d == best && c < best_col)) {
      best = d;
      best_col = c;
    }
  }
  const double v = std::clamp(p.v, 0.0, 1.0);
  int row = std::clamp(static_cast<int>(std::floor(v * WCSGrid::kRows)), 0, WCSGrid::kRows - 1);
  int best_row = row;
  double bv = std::abs(v - WCSGrid::value_center(row));
  if (row > 0) {
    const double d = std::abs(v - WCSGrid::value_center(row - 1));
    if (d <= bv) {
      bv = d;
      best_row = row - 1;
    }
  }
  return {best_row, best_col};
}

}  // namespace cqlab
