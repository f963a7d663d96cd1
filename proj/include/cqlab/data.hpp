#pragma once

// Labelled image datasets: CIFAR-style binary batches, image directories with
// a label manifest, augmentation, and the synthetic sets used for desk-scale
// experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cqlab/colour.hpp"
#include "cqlab/common.hpp"
#include "cqlab/layers.hpp"
#include "cqlab/png.hpp"
#include "cqlab/recognition.hpp"
#include "cqlab/wcs.hpp"

namespace cqlab {

using Dataset = std::vector<LabelledImage>;

// splitmix64 finaliser; used to derive independent per-epoch/per-purpose seeds.
inline std::uint64_t mix_seed(std::uint64_t x)
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0)
{
  return mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ index);
}

inline int class_count(const Dataset& d)
{
  int k = 0;
  for (const auto& s : d) k = std::max(k, s.label + 1);
  return k;
}

// ------------------------------------------------------------------ ingest

// CIFAR binary layout: per record `label_bytes` label bytes (the last one is
// used, so CIFAR-100's coarse+fine records give fine labels) followed by
// 3 x 32 x 32 planar channel bytes.
inline Dataset load_cifar_binary(const std::string& path, int label_bytes = 1, int num_classes = 0)
{
  if (label_bytes < 1 || label_bytes > 2) throw ConfigError("load_cifar_binary: label_bytes must be 1 or 2");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t plane = 32 * 32;
  const std::size_t record = label_bytes + 3 * plane;
  if (bytes.empty()) throw LoadError(path + ": empty file");
  if (bytes.size() % record != 0)
    throw LoadError(path + ": truncated record at byte offset " + std::to_string(bytes.size() / record * record));
  Dataset out;
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    const int label = bytes[off + label_bytes - 1];
    if (num_classes > 0 && label >= num_classes)
      throw LoadError(path + ": unknown label " + std::to_string(label) + " at byte offset " + std::to_string(off));
    std::vector<double> data(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c) data[p * 3 + c] = bytes[off + label_bytes + c * plane + p] / 255.0;
    out.push_back({RGBImage(32, 32, std::move(data)), label});
  }
  return out;
}

// Directory with `labels.csv` ("file,label" rows). Labels are integers, or
// names listed one per line in an optional `classes.txt`.
inline Dataset load_image_directory(const std::string& dir)
{
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::map<std::string, int> classes;
  if (std::ifstream cls(root / "classes.txt"); cls) {
    std::string name;
    while (std::getline(cls, name)) {
      if (!name.empty() && name.back() == '\r') name.pop_back();
      if (!name.empty()) classes.emplace(name, static_cast<int>(classes.size()));
    }
  }
  std::ifstream in(root / "labels.csv");
  if (!in) throw LoadError("missing labels.csv in " + dir);
  Dataset out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 2) throw LoadError("labels.csv: expected file,label", lineno);
    if (lineno == 1 && cells[0] == "file") continue;
    int label = -1;
    if (!classes.empty()) {
      auto it = classes.find(cells[1]);
      if (it == classes.end()) throw LoadError("labels.csv: unknown label '" + cells[1] + "'", lineno);
      label = it->second;
    } else if (!detail::parse_int(cells[1], label) || label < 0) {
      throw LoadError("labels.csv: unknown label '" + cells[1] + "'", lineno);
    }
    out.push_back({read_png((root / cells[0]).string()), label});
  }
  return out;
}

// ------------------------------------------------------------- augmentation

// Reflect-pad by `pad`, random crop back to the original size, then a random
// horizontal flip.
inline RGBImage augment(const RGBImage& img, int pad, Rng& rng)
{
  const int h = img.height(), w = img.width();
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
  };
  std::uniform_int_distribution<int> offset(0, 2 * pad);
  const int oy = offset(rng) - pad, ox = offset(rng) - pad;
  const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  RGBImage out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sx = reflect((flip ? w - 1 - x : x) + ox, w);
      out.set_pixel(y, x, img.pixel(reflect(y + oy, h), sx));
    }
  return out;
}

// Seeded permutation of [0, n).
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed)
{
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// ---------------------------------------------------------------- synthetic

namespace detail {
inline RGB jittered_hsv(double h, double s, double v, double noise, Rng& rng)
{
  std::normal_distribution<double> n(0.0, noise);
  return hsv_to_rgb(make_hsv(h + n(rng) * kTwoPi * 0.1, s + n(rng), v + n(rng)));
}
}  // namespace detail

// Four classes told apart by the hue of the largest rectangle (red,
// yellow-green, cyan, violet, each +-0.25 rad). Up to `distractors` smaller
// rectangles are drawn on top with hues halfway between the class hues, and
// the background is a weakly saturated random hue. Every region carries pixel
// noise. With no distractors a single quantised colour per image is enough;
// with them, fewer colours force the quantiser to pick what to keep.
inline Dataset make_colour_classes(int count, int size, std::uint64_t seed, int distractors = 3)
{
  if (count < 1 || size < 8) throw InputError("make_colour_classes: need count >= 1 and size >= 8");
  if (distractors < 0) throw InputError("make_colour_classes: distractor count must be >= 0");
  struct Rect {
    int y0, x0, h, w;
    double hue, s, v;
  };
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int small = size * 5 / 32, large = size * 3 / 8;
  Dataset out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const int label = i % 4;
    const double bg_h = u(rng) * kTwoPi, bg_s = 0.1 + 0.25 * u(rng), bg_v = 0.35 + 0.55 * u(rng);
    std::vector<Rect> rects;
    for (int d = 0; d < distractors; ++d) {
      const int h = small + static_cast<int>(u(rng) * small), w = small + static_cast<int>(u(rng) * small);
      rects.push_back({static_cast<int>(u(rng) * (size - h)), static_cast<int>(u(rng) * (size - w)), h, w,
                       (static_cast<int>(u(rng) * 4) + 0.5) * kTwoPi / 4 + (u(rng) - 0.5) * 0.5, 0.55 + 0.45 * u(rng),
                       0.45 + 0.55 * u(rng)});
    }
    const int h = large + static_cast<int>(u(rng) * large / 2), w = large + static_cast<int>(u(rng) * large / 2);
    rects.insert(rects.begin(), Rect{static_cast<int>(u(rng) * (size - h)), static_cast<int>(u(rng) * (size - w)), h, w,
                                     label * kTwoPi / 4 + (u(rng) - 0.5) * 0.5, 0.55 + 0.45 * u(rng),
                                     0.45 + 0.55 * u(rng)});
    RGBImage img(size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const Rect* top = nullptr;
        for (const auto& r : rects)
          if (y >= r.y0 && y < r.y0 + r.h && x >= r.x0 && x < r.x0 + r.w) top = &r;
        img.set_pixel(y, x, top ? detail::jittered_hsv(top->hue, top->s, top->v, 0.04, rng)
                                : detail::jittered_hsv(bg_h, bg_s, bg_v, 0.04, rng));
      }
    out.push_back({std::move(img), label});
  }
  return out;
}

// Pixel at the centre of chip `c`, with a random saturation (ignored by the
// chip lookup).
inline RGB chip_pixel(Chip c, Rng& rng)
{
  std::uniform_real_distribution<double> s(0.6, 1.0);
  return hsv_to_rgb({WCSGrid::hue_center(c.col), s(rng), WCSGrid::value_center(c.row)});
}

// Images tiled with `grid` x `grid` blocks, each block one chip-centre colour.
// `pick(k, rng)` draws a chip belonging to group k. The central 2x2 blocks
// share the label's group; the rest come from uniformly random groups.
inline Dataset make_chip_mosaics(int count, int size, int grid, int groups,
                                 const std::function<Chip(int, Rng&)>& pick, std::uint64_t seed)
{
  if (size % grid || grid < 2) throw InputError("make_chip_mosaics: size must be a multiple of grid >= 2");
  Rng rng(seed);
  std::uniform_int_distribution<int> any_group(0, groups - 1);
  const int block = size / grid, lo = grid / 2 - 1, hi = grid / 2;
  Dataset out;
  for (int i = 0; i < count; ++i) {
    const int label = i % groups;
    RGBImage img(size, size);
    for (int by = 0; by < grid; ++by)
      for (int bx = 0; bx < grid; ++bx) {
        const bool centre = by >= lo && by <= hi && bx >= lo && bx <= hi;
        const Chip chip = pick(centre ? label : any_group(rng), rng);
        for (int y = 0; y < block; ++y)
          for (int x = 0; x < block; ++x) img.set_pixel(by * block + y, bx * block + x, chip_pixel(chip, rng));
      }
    out.push_back({std::move(img), label});
  }
  return out;
}

// Rows r0..r1 by columns c0..c1, inclusive.
inline std::vector<Chip> chip_range(int r0, int r1, int c0, int c1)
{
  std::vector<Chip> out;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) out.push_back({r, c});
  return out;
}

// Chips of `hmap` grouped by modal term.
inline std::vector<std::vector<Chip>> chips_by_term(const HumanWCSMap& hmap)
{
  std::vector<std::vector<Chip>> out(hmap.colours());
  for (int chip = 0; chip < WCSGrid::kChips; ++chip) out[hmap.argmax(chip)].push_back(WCSGrid::chip(chip));
  return out;
}

// Mosaics whose chips are drawn from the regions of a human map; the label is
// the term of the central blocks.
inline Dataset make_term_mosaics(const HumanWCSMap& hmap, int count, int size, std::uint64_t seed)
{
  const auto regions = chips_by_term(hmap);
  for (const auto& r : regions)
    if (r.empty()) throw InputError("make_term_mosaics: a term has no modal chips");
  return make_chip_mosaics(
      count, size, 4, hmap.colours(),
      [&](int k, Rng& rng) { return regions[k][std::uniform_int_distribution<std::size_t>(0, regions[k].size() - 1)(rng)]; },
      seed);
}

// As make_term_mosaics, plus one extra class whose chips form a compact
// cluster (`latent`) carved out of the region of term `parent`.
inline Dataset make_latent_split_mosaics(const HumanWCSMap& hmap, int parent, const std::vector<Chip>& latent,
                                         int count, int size, std::uint64_t seed)
{
  auto regions = chips_by_term(hmap);
  if (parent < 0 || parent >= hmap.colours()) throw InputError("make_latent_split_mosaics: bad parent term");
  auto& host = regions[parent];
  for (const Chip& c : latent) {
    if (hmap.argmax(WCSGrid::index(c)) != parent) throw InputError("make_latent_split_mosaics: latent chip outside parent");
    host.erase(std::remove(host.begin(), host.end(), c), host.end());
  }
  regions.push_back(latent);
  for (const auto& r : regions)
    if (r.empty()) throw InputError("make_latent_split_mosaics: empty region");
  return make_chip_mosaics(
      count, size, 4, static_cast<int>(regions.size()),
      [&](int k, Rng& rng) { return regions[k][std::uniform_int_distribution<std::size_t>(0, regions[k].size() - 1)(rng)]; },
      seed);
}

}  // namespace cqlab
