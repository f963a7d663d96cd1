#pragma once

// Classical perception-centred quantisers: MedianCut, Floyd-Steinberg error
// diffusion and an 8-level octree.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <tuple>
#include <vector>

#include "cqlab/colour.hpp"
#include "cqlab/cqformer.hpp"

namespace cqlab {

struct QuantisedIndex {
  Palette palette;
  IndexMap indices;

  RGBImage image() const { return apply_palette(indices, palette); }
};

namespace detail {

struct ColourCount {
  std::array<double, 3> rgb;
  std::size_t count;
};

// Distinct colours in first-seen order plus each pixel's distinct-colour id.
inline std::vector<ColourCount> distinct_colours(const RGBImage& img, std::vector<std::size_t>& pixel_colour)
{
  std::map<std::array<double, 3>, std::size_t> lookup;
  std::vector<ColourCount> out;
  pixel_colour.resize(img.pixel_count());
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const RGB p = img.pixel(i);
    const std::array<double, 3> key{p.r, p.g, p.b};
    auto [it, fresh] = lookup.try_emplace(key, out.size());
    if (fresh) out.push_back({key, 0});
    ++out[it->second].count;
    pixel_colour[i] = it->second;
  }
  return out;
}

inline RGB to_rgb(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

}  // namespace detail

// Boxes hold distinct colours with multiplicities, so a box is never split
// between two copies of the same colour and an image with at most C colours is
// reproduced exactly.
inline QuantisedIndex median_cut(const RGBImage& img, int colours)
{
  if (colours < 1) throw ConfigError("median_cut: colour count must be >= 1");
  std::vector<std::size_t> pixel_colour;
  const auto distinct = detail::distinct_colours(img, pixel_colour);

  using Box = std::vector<std::size_t>;  // indices into distinct
  auto range_of = [&](const Box& box, int ch) {
    double lo = 1, hi = 0;
    for (std::size_t i : box) {
      lo = std::min(lo, distinct[i].rgb[ch]);
      hi = std::max(hi, distinct[i].rgb[ch]);
    }
    return hi - lo;
  };

  std::vector<Box> boxes(1);
  for (std::size_t i = 0; i < distinct.size(); ++i) boxes[0].push_back(i);

  while (static_cast<int>(boxes.size()) < colours) {
    // Box and channel with the widest range; ties go to the earlier box, then R, G, B.
    int best_box = -1, best_ch = 0;
    double best_range = 0;
    for (std::size_t b = 0; b < boxes.size(); ++b)
      for (int ch = 0; ch < 3; ++ch) {
        const double r = range_of(boxes[b], ch);
        if (r > best_range) {
          best_range = r;
          best_box = static_cast<int>(b);
          best_ch = ch;
        }
      }
    if (best_box < 0) break;  // every box is a single colour

    Box& box = boxes[best_box];
    std::sort(box.begin(), box.end(), [&](std::size_t a, std::size_t b) {
      if (distinct[a].rgb[best_ch] != distinct[b].rgb[best_ch]) return distinct[a].rgb[best_ch] < distinct[b].rgb[best_ch];
      return distinct[a].rgb < distinct[b].rgb;
    });
    std::size_t total = 0;
    for (std::size_t i : box) total += distinct[i].count;
    // Lower median pixel; its channel value and everything below go left.
    const std::size_t median = (total - 1) / 2;
    std::size_t seen = 0;
    double cut = distinct[box.front()].rgb[best_ch];
    for (std::size_t i : box) {
      seen += distinct[i].count;
      if (seen > median) {
        cut = distinct[i].rgb[best_ch];
        break;
      }
    }
    Box left, right;
    for (std::size_t i : box) (distinct[i].rgb[best_ch] <= cut ? left : right).push_back(i);
    if (right.empty()) {
      left.clear();
      for (std::size_t i : box) (distinct[i].rgb[best_ch] < cut ? left : right).push_back(i);
    }
    box = std::move(left);
    boxes.insert(boxes.begin() + best_box + 1, std::move(right));
  }

  QuantisedIndex out;
  std::vector<int> colour_box(distinct.size());
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const Box& box = boxes[b];
    if (box.size() == 1) {
      out.palette.colours.push_back(detail::to_rgb(distinct[box[0]].rgb));
    } else {
      std::array<double, 3> sum{0, 0, 0};
      std::size_t n = 0;
      for (std::size_t i : box) {
        for (int ch = 0; ch < 3; ++ch) sum[ch] += distinct[i].rgb[ch] * static_cast<double>(distinct[i].count);
        n += distinct[i].count;
      }
      for (auto& s : sum) s = std::clamp(s / static_cast<double>(n), 0.0, 1.0);
      out.palette.colours.push_back(detail::to_rgb(sum));
    }
    for (std::size_t i : box) colour_box[i] = static_cast<int>(b);
  }
  out.indices = IndexMap{img.height(), img.width(), std::vector<int>(img.pixel_count())};
  for (std::size_t i = 0; i < img.pixel_count(); ++i) out.indices.data[i] = colour_box[pixel_colour[i]];
  return out;
}

// Nearest palette entry by Euclidean RGB distance; ties to the lower index.
inline int nearest_palette_index(const Palette& p, double r, double g, double b)
{
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double dr = r - p.colours[k].r, dg = g - p.colours[k].g, db = b - p.colours[k].b;
    const double d = dr * dr + dg * dg + db * db;
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

// Unidirectional scan, weights 7/16 right, 3/16 below-left, 5/16 below,
// 1/16 below-right.
inline IndexMap floyd_steinberg_dither(const RGBImage& img, const Palette& palette)
{
  if (palette.size() == 0) throw InputError("floyd_steinberg_dither: empty palette");
  const int h = img.height(), w = img.width();
  std::vector<double> buf = img.data();
  IndexMap out{h, w, std::vector<int>(img.pixel_count())};
  auto spread = [&](int y, int x, const double* err, double weight) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    double* px = &buf[(static_cast<std::size_t>(y) * w + x) * 3];
    for (int c = 0; c < 3; ++c) px[c] = std::clamp(px[c] + err[c] * weight, 0.0, 1.0);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double* px = &buf[(static_cast<std::size_t>(y) * w + x) * 3];
      const int k = nearest_palette_index(palette, px[0], px[1], px[2]);
      out.data[static_cast<std::size_t>(y) * w + x] = k;
      const RGB& q = palette.colours[k];
      const double err[3] = {px[0] - q.r, px[1] - q.g, px[2] - q.b};
      if (err[0] == 0 && err[1] == 0 && err[2] == 0) continue;
      spread(y, x + 1, err, 7.0 / 16);
      spread(y + 1, x - 1, err, 3.0 / 16);
      spread(y + 1, x, err, 5.0 / 16);
      spread(y + 1, x + 1, err, 1.0 / 16);
    }
  return out;
}

// Octree over 8-bit channel codes. Leaves are merged deepest first, then by
// smallest pixel count, then by creation order, until at most C remain.
inline QuantisedIndex octree_quantise(const RGBImage& img, int colours)
{
  if (colours < 1) throw ConfigError("octree_quantise: colour count must be >= 1");
  struct Node {
    int depth = 0;
    int parent = -1;
    std::array<int, 8> child{-1, -1, -1, -1, -1, -1, -1, -1};
    std::array<double, 3> sum{0, 0, 0};
    std::size_t count = 0;
    bool leaf = false;
    // Exact colour while every member is identical, so single-colour leaves
    // reproduce their input bit for bit.
    std::array<double, 3> first{0, 0, 0};
    bool uniform = true;
  };
  std::vector<Node> nodes(1);
  auto code = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  auto slot = [&](const RGB& p, int depth) {
    const int bit = 7 - depth;
    return (((code(p.r) >> bit) & 1) << 2) | (((code(p.g) >> bit) & 1) << 1) | ((code(p.b) >> bit) & 1);
  };
  auto absorb = [](Node& n, const std::array<double, 3>& rgb, std::size_t count, bool uniform) {
    if (n.count == 0) {
      n.first = rgb;
      n.uniform = uniform;
    } else if (!uniform || rgb != n.first) {
      n.uniform = false;
    }
    n.count += count;
  };

  std::size_t leaves = 0;
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const RGB p = img.pixel(i);
    const std::array<double, 3> rgb{p.r, p.g, p.b};
    int cur = 0;
    for (int depth = 0; depth < 8; ++depth) {
      const int s = slot(p, depth);
      if (nodes[cur].child[s] < 0) {
        nodes.push_back({});
        nodes.back().depth = depth + 1;
        nodes.back().parent = cur;
        nodes[cur].child[s] = static_cast<int>(nodes.size()) - 1;
        if (depth + 1 == 8) {
          nodes.back().leaf = true;
          ++leaves;
        }
      }
      cur = nodes[cur].child[s];
    }
    for (int c = 0; c < 3; ++c) nodes[cur].sum[c] += rgb[c];
    absorb(nodes[cur], rgb, 1, true);
  }
  // Subtree pixel counts for internal nodes.
  std::vector<std::size_t> subtree(nodes.size(), 0);
  for (std::size_t i = nodes.size(); i-- > 0;) {
    if (nodes[i].leaf) subtree[i] = nodes[i].count;
    if (nodes[i].parent >= 0) subtree[nodes[i].parent] += subtree[i];
  }

  auto reducible = [&](int i) {
    if (nodes[i].leaf) return false;
    for (int c : nodes[i].child)
      if (c >= 0 && !nodes[c].leaf) return false;
    return true;
  };
  using Key = std::tuple<int, std::size_t, int>;  // (-depth, count, creation order)
  std::set<Key> queue;
  for (int i = 0; i < static_cast<int>(nodes.size()); ++i)
    if (reducible(i)) queue.insert({-nodes[i].depth, subtree[i], i});

  while (leaves > static_cast<std::size_t>(colours) && !queue.empty()) {
    const int i = std::get<2>(*queue.begin());
    queue.erase(queue.begin());
    Node& n = nodes[i];
    std::size_t merged = 0;
    for (int& c : n.child) {
      if (c < 0) continue;
      for (int k = 0; k < 3; ++k) n.sum[k] += nodes[c].sum[k];
      absorb(n, nodes[c].first, nodes[c].count, nodes[c].uniform);
      nodes[c].leaf = false;
      nodes[c].count = 0;
      ++merged;
      c = -1;
    }
    n.leaf = true;
    leaves -= merged - 1;
    if (n.parent >= 0 && reducible(n.parent)) queue.insert({-nodes[n.parent].depth, subtree[n.parent], n.parent});
  }

  QuantisedIndex out;
  std::vector<int> palette_index(nodes.size(), -1);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (!n.leaf || n.count == 0) continue;
    palette_index[i] = static_cast<int>(out.palette.size());
    if (n.uniform) {
      out.palette.colours.push_back(detail::to_rgb(n.first));
    } else {
      const double k = static_cast<double>(n.count);
      out.palette.colours.push_back({std::clamp(n.sum[0] / k, 0.0, 1.0), std::clamp(n.sum[1] / k, 0.0, 1.0),
                                     std::clamp(n.sum[2] / k, 0.0, 1.0)});
    }
  }
  out.indices = IndexMap{img.height(), img.width(), std::vector<int>(img.pixel_count())};
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const RGB p = img.pixel(i);
    int cur = 0;
    for (int depth = 0; !nodes[cur].leaf; ++depth) cur = nodes[cur].child[slot(p, depth)];
    out.indices.data[i] = palette_index[cur];
  }
  return out;
}

}  // namespace cqlab
