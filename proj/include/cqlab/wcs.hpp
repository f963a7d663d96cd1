#pragma once

// World Color Survey maps: human per-chip term distributions (loaded from
// CSV), machine maps built by counting colour indices per chip, and the
// projection of a human map onto an image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cqlab/colour.hpp"
#include "cqlab/common.hpp"
#include "cqlab/cqformer.hpp"
#include "cqlab/objectives.hpp"

namespace cqlab {

struct HumanWCSMap {
  std::vector<std::string> terms;
  std::vector<double> probs;  // kChips x C, chip-major

  int colours() const noexcept { return static_cast<int>(terms.size()); }
  double operator()(Chip chip, int term) const { return probs[WCSGrid::index(chip) * terms.size() + term]; }
  const double* chip_row(int chip_index) const { return probs.data() + chip_index * terms.size(); }

  int term_index(const std::string& name) const
  {
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (terms[i] == name) return static_cast<int>(i);
    return -1;
  }

  // Most probable term per chip; ties to the lower index.
  int argmax(int chip_index) const
  {
    const double* row = chip_row(chip_index);
    int best = 0;
    for (int k = 1; k < colours(); ++k)
      if (row[k] > row[best]) best = k;
    return best;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_int(const std::string& s, int& out)
{
  std::size_t used = 0;
  try {
    out = std::stoi(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size();
}

inline bool parse_double(const std::string& s, double& out)
{
  std::size_t used = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size();
}

}  // namespace detail

// CSV with header "row,col,term,probability"; one line per chip-term pair.
// Chips absent from the file get a uniform distribution.
inline HumanWCSMap parse_human_map(std::istream& in)
{
  struct Entry {
    int chip;
    std::string term;
    double p;
    long line;
  };
  std::vector<Entry> entries;
  HumanWCSMap map;
  std::string line;
  long lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    const auto cells = detail::split_csv_line(line);
    if (!header) {
      header = true;
      if (cells.size() == 4 && cells[0] == "row") continue;
    }
    if (cells.size() != 4) throw LoadError("human map: expected 4 columns", lineno);
    int row = 0, col = 0;
    double p = 0;
    if (!detail::parse_int(cells[0], row) || !detail::parse_int(cells[1], col))
      throw LoadError("human map: malformed chip coordinate", lineno);
    if (row < 0 || row >= WCSGrid::kRows || col < 0 || col >= WCSGrid::kCols)
      throw LoadError("human map: chip outside the 8x40 grid", lineno);
    if (cells[2].empty()) throw LoadError("human map: empty term name", lineno);
    if (!detail::parse_double(cells[3], p)) throw LoadError("human map: malformed probability", lineno);
    if (!(p >= 0.0 && p <= 1.0)) throw LoadError("human map: probability outside [0,1]", lineno);
    if (map.term_index(cells[2]) < 0) map.terms.push_back(cells[2]);
    entries.push_back({WCSGrid::index({row, col}), cells[2], p, lineno});
  }
  if (map.terms.empty()) throw LoadError("human map: no entries");
  const std::size_t c = map.terms.size();
  map.probs.assign(WCSGrid::kChips * c, 0.0);
  std::vector<double> sums(WCSGrid::kChips, 0.0);
  std::vector<long> last_line(WCSGrid::kChips, 0);
  for (const auto& e : entries) {
    map.probs[e.chip * c + map.term_index(e.term)] += e.p;
    sums[e.chip] += e.p;
    last_line[e.chip] = e.line;
  }
  for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
    double* row = map.probs.data() + chip * c;
    if (!last_line[chip]) {
      std::fill(row, row + c, 1.0 / static_cast<double>(c));
      continue;
    }
    if (std::abs(sums[chip] - 1.0) > 1e-3)
      throw LoadError("human map: probabilities of chip (" + std::to_string(chip / WCSGrid::kCols) + "," +
                          std::to_string(chip % WCSGrid::kCols) + ") sum to " + std::to_string(sums[chip]),
                      last_line[chip]);
    if (std::abs(sums[chip] - 1.0) > 1e-12)
      for (std::size_t k = 0; k < c; ++k) row[k] /= sums[chip];
  }
  return map;
}

inline HumanWCSMap load_human_map(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open human map " + path);
  return parse_human_map(in);
}

inline void write_human_map(std::ostream& out, const HumanWCSMap& map)
{
  out << "row,col,term,probability\n";
  out << std::setprecision(17);
  for (int chip = 0; chip < WCSGrid::kChips; ++chip)
    for (int k = 0; k < map.colours(); ++k)
      out << chip / WCSGrid::kCols << ',' << chip % WCSGrid::kCols << ',' << map.terms[k] << ','
          << map.chip_row(chip)[k] << '\n';
}

inline void save_human_map(const std::string& path, const HumanWCSMap& map)
{
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path);
  write_human_map(out, map);
}

// One-hot map whose chip (r, c) carries term assign(r, c).
inline HumanWCSMap one_hot_human_map(std::vector<std::string> terms, const std::function<int(Chip)>& assign)
{
  HumanWCSMap map;
  map.terms = std::move(terms);
  map.probs.assign(WCSGrid::kChips * map.terms.size(), 0.0);
  for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
    const int k = assign(WCSGrid::chip(chip));
    if (k < 0 || k >= map.colours()) throw InputError("one_hot_human_map: term index out of range");
    map.probs[chip * map.terms.size() + k] = 1.0;
  }
  return map;
}

// ------------------------------------------------------------- machine maps

struct MachineWCSMap {
  static constexpr int kUnobserved = -1;
  int colours = 0;
  std::vector<int> index;                 // kChips; kUnobserved where no pixel landed
  std::vector<std::uint64_t> mass;        // kChips pixel counts
  std::vector<std::uint64_t> counts;      // kChips x C
  std::vector<RGB> display_colour;        // per colour index: mean RGB of its pixels
  std::vector<std::uint64_t> colour_mass; // per colour index pixel count

  int observed() const
  {
    return static_cast<int>(std::count_if(index.begin(), index.end(), [](int i) { return i != kUnobserved; }));
  }
  std::uint64_t total_mass() const
  {
    std::uint64_t s = 0;
    for (auto m : mass) s += m;
    return s;
  }
  // Fraction of all pixels assigned to each colour index.
  std::vector<double> pixel_share() const
  {
    std::vector<double> share(colours, 0.0);
    std::uint64_t total = 0;
    for (auto m : colour_mass) total += m;
    if (!total) return share;
    for (int c = 0; c < colours; ++c) share[c] = static_cast<double>(colour_mass[c]) / static_cast<double>(total);
    return share;
  }
  // Chips whose modal colour is c.
  std::vector<int> region(int c) const
  {
    std::vector<int> chips;
    for (int i = 0; i < WCSGrid::kChips; ++i)
      if (index[i] == c) chips.push_back(i);
    return chips;
  }
};

// Accumulates per-chip index counts. Colour sums use 32.32 fixed point so the
// result does not depend on the order images are added.
class MachineMapBuilder {
 public:
  explicit MachineMapBuilder(int colours) : colours_(colours)
  {
    if (colours < 1) throw InputError("MachineMapBuilder: colour count must be >= 1");
    counts_.assign(static_cast<std::size_t>(WCSGrid::kChips) * colours, 0);
    sums_.assign(static_cast<std::size_t>(colours) * 3, 0);
    colour_mass_.assign(colours, 0);
  }

  void add(const RGBImage& img, const IndexMap& indices)
  {
    if (indices.height != img.height() || indices.width != img.width())
      throw InputError("MachineMapBuilder: index map does not match image");
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
      const int c = indices.data[i];
      if (c < 0 || c >= colours_) throw InputError("MachineMapBuilder: colour index out of range");
      const RGB p = img.pixel(i);
      const Chip chip = pixel_to_chip(rgb_to_hsv(p));
      ++counts_[static_cast<std::size_t>(WCSGrid::index(chip)) * colours_ + c];
      ++colour_mass_[c];
      sums_[c * 3 + 0] += fixed(p.r);
      sums_[c * 3 + 1] += fixed(p.g);
      sums_[c * 3 + 2] += fixed(p.b);
    }
  }

  MachineWCSMap build() const
  {
    MachineWCSMap m;
    m.colours = colours_;
    m.counts = counts_;
    m.index.assign(WCSGrid::kChips, MachineWCSMap::kUnobserved);
    m.mass.assign(WCSGrid::kChips, 0);
    for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
      const std::uint64_t* row = counts_.data() + static_cast<std::size_t>(chip) * colours_;
      int best = 0;
      for (int c = 0; c < colours_; ++c) {
        m.mass[chip] += row[c];
        if (row[c] > row[best]) best = c;
      }
      if (m.mass[chip]) m.index[chip] = best;
    }
    m.colour_mass = colour_mass_;
    m.display_colour.resize(colours_);
    for (int c = 0; c < colours_; ++c)
      if (colour_mass_[c]) {
        const double n = static_cast<double>(colour_mass_[c]) * kScale;
        m.display_colour[c] = {static_cast<double>(sums_[c * 3]) / n, static_cast<double>(sums_[c * 3 + 1]) / n,
                               static_cast<double>(sums_[c * 3 + 2]) / n};
      }
    return m;
  }

 private:
  static constexpr double kScale = 4294967296.0;
  static std::uint64_t fixed(double v) { return static_cast<std::uint64_t>(std::llround(v * kScale)); }

  int colours_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> sums_;
  std::vector<std::uint64_t> colour_mass_;
};

using IndexQuantiser = std::function<IndexMap(const RGBImage&)>;

inline MachineWCSMap build_machine_wcs_map(const std::vector<RGBImage>& images, const IndexQuantiser& quantiser,
                                           int colours)
{
  MachineMapBuilder builder(colours);
  for (const auto& img : images) builder.add(img, quantiser(img));
  return builder.build();
}

// Per-pixel copy of the human distribution at the pixel's chip.
inline ProbabilityMap project_human_map(const RGBImage& img, const HumanWCSMap& hmap)
{
  const int c = hmap.colours();
  ProbabilityMap out{img.height(), img.width(), c, 1.0, std::vector<double>(img.pixel_count() * c)};
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double* row = hmap.chip_row(WCSGrid::index(pixel_to_chip(rgb_to_hsv(img.pixel(i)))));
    std::copy(row, row + c, out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

// Fraction of observed chips whose machine index equals the human argmax.
inline double map_agreement(const MachineWCSMap& machine, const HumanWCSMap& human)
{
  if (machine.colours != human.colours()) throw InputError("map_agreement: colour counts differ");
  int observed = 0, agree = 0;
  for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
    if (machine.index[chip] == MachineWCSMap::kUnobserved) continue;
    ++observed;
    if (machine.index[chip] == human.argmax(chip)) ++agree;
  }
  if (!observed) {
    warn("map_agreement: machine map has no observed chips");
    return 0.0;
  }
  return static_cast<double>(agree) / observed;
}

// Mean (hue, value) of each term over chip centres, weighted by probability
// and averaged in cone space with unit saturation.
inline std::vector<HueValue> human_term_centres(const HumanWCSMap& hmap)
{
  std::vector<HueValue> out(hmap.colours());
  for (int k = 0; k < hmap.colours(); ++k) {
    Cone acc{0, 0, 0};
    double w = 0;
    for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
      const double p = hmap.chip_row(chip)[k];
      const Chip ch = WCSGrid::chip(chip);
      const Cone z = hsv_to_cone({WCSGrid::hue_center(ch.col), 1.0, WCSGrid::value_center(ch.row)});
      for (int j = 0; j < 3; ++j) acc[j] += p * z[j];
      w += p;
    }
    if (w > 0)
      for (auto& a : acc) a /= w;
    const HSVPixel hsv = cone_to_hsv(acc);
    out[k] = {hsv.h, hsv.v};
  }
  return out;
}

// ------------------------------------------------------------------- export

inline void write_machine_map_csv(std::ostream& out, const MachineWCSMap& m)
{
  out << "row,col,index,mass\n";
  for (int chip = 0; chip < WCSGrid::kChips; ++chip)
    out << chip / WCSGrid::kCols << ',' << chip % WCSGrid::kCols << ',' << m.index[chip] << ',' << m.mass[chip] << '\n';
}

// Display colour of a chip centre (full saturation).
inline RGB chip_colour(Chip c) { return hsv_to_rgb({WCSGrid::hue_center(c.col), 1.0, WCSGrid::value_center(c.row)}); }

namespace detail {
inline RGBImage render_grid(const std::function<RGB(int)>& colour_of, int cell)
{
  if (cell < 1) throw InputError("render: cell size must be >= 1");
  RGBImage img(WCSGrid::kRows * cell, WCSGrid::kCols * cell);
  for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
    const Chip c = WCSGrid::chip(chip);
    const RGB rgb = colour_of(chip);
    const int top = (WCSGrid::kRows - 1 - c.row) * cell;  // lightest row on top
    for (int y = 0; y < cell; ++y)
      for (int x = 0; x < cell; ++x) img.set_pixel(top + y, c.col * cell + x, rgb);
  }
  return img;
}
}  // namespace detail

// One cell per chip painted with the chip's cluster display colour;
// unobserved chips are mid grey.
inline RGBImage render_machine_map(const MachineWCSMap& m, int cell = 8)
{
  return detail::render_grid(
      [&](int chip) {
        const int idx = m.index[chip];
        return idx == MachineWCSMap::kUnobserved ? RGB{0.5, 0.5, 0.5} : m.display_colour[idx];
      },
      cell);
}

// Chips painted with the probability-weighted mean chip colour of their modal term.
inline RGBImage render_human_map(const HumanWCSMap& h, int cell = 8)
{
  std::vector<RGB> term_colour(h.colours());
  for (int k = 0; k < h.colours(); ++k) {
    double w = 0;
    RGB acc;
    for (int chip = 0; chip < WCSGrid::kChips; ++chip) {
      const double p = h.chip_row(chip)[k];
      const RGB c = chip_colour(WCSGrid::chip(chip));
      acc.r += p * c.r;
      acc.g += p * c.g;
      acc.b += p * c.b;
      w += p;
    }
    if (w > 0) term_colour[k] = {acc.r / w, acc.g / w, acc.b / w};
  }
  return detail::render_grid([&](int chip) { return term_colour[h.argmax(chip)]; }, cell);
}

}  // namespace cqlab
