#pragma once

// Two-branch colour quantiser.
//
//   Annotation branch: U-shaped conv encoder -> per-pixel activation map over
//   C colours. Training uses Softmax(activation / tau); inference uses argmax.
//   Palette branch: conv stem -> F0 (H/4 x W/4 x d) -> depth-wise positional
//   encoding -> keys/values -> cross-attention with C learned queries ->
//   FFN + residual -> FFN -> sigmoid -> C x 3 palette.
//
// The quantised image is probs (H*W x C) times palette (C x 3).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cqlab/colour.hpp"
#include "cqlab/common.hpp"
#include "cqlab/layers.hpp"

namespace cqlab {

// --------------------------------------------------------------- value types

// H x W x C channel-last maps.
struct ActivationMap {
  int height = 0, width = 0, colours = 0;
  std::vector<double> data;
  double operator()(int y, int x, int c) const
  {
    return data[(static_cast<std::size_t>(y) * width + x) * colours + c];
  }
};

struct ProbabilityMap {
  int height = 0, width = 0, colours = 0;
  double temperature = 1.0;
  std::vector<double> data;
  double operator()(int y, int x, int c) const
  {
    return data[(static_cast<std::size_t>(y) * width + x) * colours + c];
  }
};

struct IndexMap {
  int height = 0, width = 0;
  std::vector<int> data;
  int operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const IndexMap&, const IndexMap&) = default;
};

struct Palette {
  std::vector<RGB> colours;
  std::size_t size() const noexcept { return colours.size(); }
  friend bool operator==(const Palette&, const Palette&) = default;
};

inline ProbabilityMap softmax_with_temperature(const ActivationMap& a, double tau)
{
  if (!(tau > 0)) throw ConfigError("softmax_with_temperature: temperature must be positive");
  ProbabilityMap out{a.height, a.width, a.colours, tau, std::vector<double>(a.data.size())};
  const int c = a.colours;
  for (std::size_t p = 0; p < static_cast<std::size_t>(a.height) * a.width; ++p) {
    const double* z = a.data.data() + p * c;
    double* o = out.data.data() + p * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0;
    for (int k = 0; k < c; ++k) s += (o[k] = std::exp((z[k] - mx) / tau));
    for (int k = 0; k < c; ++k) o[k] /= s;
  }
  return out;
}

namespace detail {
inline IndexMap argmax_rows(int h, int w, int c, const std::vector<double>& data)
{
  IndexMap m{h, w, std::vector<int>(static_cast<std::size_t>(h) * w)};
  for (std::size_t p = 0; p < m.data.size(); ++p) {
    const double* z = data.data() + p * c;
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (z[k] > z[best]) best = k;
    m.data[p] = best;
  }
  return m;
}
}  // namespace detail

// Per-pixel argmax; ties go to the lowest index.
inline IndexMap argmax_index_map(const ActivationMap& a)
{
  return detail::argmax_rows(a.height, a.width, a.colours, a.data);
}
inline IndexMap argmax_index_map(const ProbabilityMap& m)
{
  return detail::argmax_rows(m.height, m.width, m.colours, m.data);
}

inline RGBImage apply_palette(const IndexMap& m, const Palette& p)
{
  RGBImage out(m.height, m.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.set_pixel(i, p.colours.at(static_cast<std::size_t>(m.data[i])));
  return out;
}

// Per-pixel convex combination of palette colours.
inline RGBImage mix_palette(const ProbabilityMap& m, const Palette& p)
{
  if (static_cast<std::size_t>(m.colours) != p.size()) throw InputError("mix_palette: colour count mismatch");
  RGBImage out(m.height, m.width);
  for (std::size_t i = 0; i < out.pixel_count(); ++i) {
    RGB acc;
    for (int c = 0; c < m.colours; ++c) {
      const double w = m.data[i * m.colours + c];
      acc.r += w * p.colours[c].r;
      acc.g += w * p.colours[c].g;
      acc.b += w * p.colours[c].b;
    }
    acc.r = std::clamp(acc.r, 0.0, 1.0);
    acc.g = std::clamp(acc.g, 0.0, 1.0);
    acc.b = std::clamp(acc.b, 0.0, 1.0);
    out.set_pixel(i, acc);
  }
  return out;
}

// ------------------------------------------------------------ tensor bridges

template <class T>
Tensor<T> to_batch(std::span<const RGBImage> images)
{
  if (images.empty()) throw InputError("to_batch: empty batch");
  const int h = images[0].height(), w = images[0].width();
  Tensor<T> out({static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].height() != h || images[n].width() != w) throw InputError("to_batch: images differ in size");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) out.at(static_cast<int>(n), c, y, x) = static_cast<T>(images[n](y, x, c));
  }
  return out;
}

template <class T>
Tensor<T> to_batch(const RGBImage& image)
{
  return to_batch<T>(std::span<const RGBImage>(&image, 1));
}

template <class T>
RGBImage image_from_batch(const Tensor<T>& t, int n)
{
  const int h = t.dim(2), w = t.dim(3);
  RGBImage out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out(y, x, c) = std::clamp(static_cast<double>(t.at(n, c, y, x)), 0.0, 1.0);
  return out;
}

// Reflect-pads H and W up to the next multiple of `multiple`.
template <class T>
Tensor<T> reflect_pad_to_multiple(const Tensor<T>& x, int multiple)
{
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ph = (h + multiple - 1) / multiple * multiple;
  const int pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return x;
  auto reflect = [](int i, int size) {
    if (size == 1) return 0;
    const int period = 2 * (size - 1);
    i %= period;
    return i < size ? i : period - i;
  };
  Tensor<T> out({n, c, ph, pw});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ph; ++y)
        for (int xx = 0; xx < pw; ++xx) out.at(b, ch, y, xx) = x.at(b, ch, reflect(y, h), reflect(xx, w));
  return out;
}

// ------------------------------------------------------------------- network

enum class PaletteMode {
  attention,        // palette branch with reference palette queries
  fixed_centroids,  // ablation: one learned palette shared by every image
};

struct CQFormerConfig {
  int colours = 4;
  int query_dim = 64;
  int encoder_width = 16;
  PaletteMode palette = PaletteMode::attention;
};

// Softmax(Q K^T / sqrt(d)) V for one batch: q [N, C, d], k/v [N, L, d].
template <class T>
ad::Var<T> cross_attention(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v)
{
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  auto scores = ad::bmm(q, ad::transpose12(k));
  auto weights = ad::softmax(scores, 2, inv_sqrt_d);
  return ad::bmm(weights, v);
}

// U-shaped encoder with two downsampling stages and skip connections. The
// input pixels are also fed to the head so per-pixel colour stays visible.
template <class T>
class AnnotationEncoder {
 public:
  AnnotationEncoder() = default;
  AnnotationEncoder(ParameterList<T>& params, int width, int colours, Rng& rng)
  {
    const int w1 = width, w2 = 2 * width, w3 = 4 * width;
    enc1_ = Conv2d<T>(params, "encoder.enc1", 3, w1, 3, 1, rng);
    enc2_ = Conv2d<T>(params, "encoder.enc2", w1, w2, 3, 2, rng);
    enc3_ = Conv2d<T>(params, "encoder.enc3", w2, w3, 3, 2, rng);
    dec2_ = Conv2d<T>(params, "encoder.dec2", w3 + w2, w2, 3, 1, rng);
    dec1_ = Conv2d<T>(params, "encoder.dec1", w2 + w1, w1, 3, 1, rng);
    head_ = Conv2d<T>(params, "encoder.head", w1 + 3, colours, 1, 1, rng);
  }

  // x: centred pixels [N, 3, H, W] with H, W divisible by 4.
  ad::Var<T> operator()(const ad::Var<T>& x) const
  {
    auto e1 = ad::relu(enc1_(x));
    auto e2 = ad::relu(enc2_(e1));
    auto e3 = ad::relu(enc3_(e2));
    auto d2 = ad::relu(dec2_(ad::concat_channels(ad::upsample2x(e3), e2)));
    auto d1 = ad::relu(dec1_(ad::concat_channels(ad::upsample2x(d2), e1)));
    return head_(ad::concat_channels(d1, x));
  }

 private:
  Conv2d<T> enc1_, enc2_, enc3_, dec2_, dec1_, head_;
};

template <class T>
class PaletteBranch {
 public:
  PaletteBranch() = default;
  PaletteBranch(ParameterList<T>& params, int colours, int d, Rng& rng) : d_(d)
  {
    stem1_ = Conv2d<T>(params, "palette.stem1", 3, d / 2, 3, 2, rng);
    stem2_ = Conv2d<T>(params, "palette.stem2", d / 2, d, 3, 2, rng);
    pos_ = DepthwiseConv2d<T>(params, "palette.pos", d, 3, rng);
    key_ = Linear<T>(params, "palette.key", d, d, rng);
    value_ = Linear<T>(params, "palette.value", d, d, rng);
    ffn1_ = Linear<T>(params, "palette.ffn.fc1", d, 4 * d, rng);
    ffn2_ = Linear<T>(params, "palette.ffn.fc2", 4 * d, d, rng);
    dec1_ = Linear<T>(params, "palette.decode.fc1", d, d, rng);
    dec2_ = Linear<T>(params, "palette.decode.fc2", d, 3, rng);
    queries_ = params.add("palette.queries", normal_tensor<T>({colours, d}, 1.0 / std::sqrt(d), rng));
  }

  // x: centred pixels [N, 3, H, W] with H, W divisible by 4. Returns [N, C, 3].
  ad::Var<T> operator()(const ad::Var<T>& x) const
  {
    const int n = x.dim(0);
    auto f0 = stem2_(ad::gelu(stem1_(x)));
    auto feat = ad::add(f0, pos_(f0));
    const int len = feat.dim(2) * feat.dim(3);
    auto seq = ad::transpose12(ad::reshape(feat, {n, d_, len}));  // [N, L, d]
    auto q = ad::broadcast_batch(queries_, n);
    auto attended = cross_attention(q, key_(seq), value_(seq));
    auto embed = ad::add(q, ffn2_(ad::gelu(ffn1_(attended))));
    return ad::sigmoid(dec2_(ad::gelu(dec1_(embed))));
  }

  const ad::Var<T>& queries() const noexcept { return queries_; }

 private:
  int d_ = 0;
  Conv2d<T> stem1_, stem2_;
  DepthwiseConv2d<T> pos_;
  Linear<T> key_, value_, ffn1_, ffn2_, dec1_, dec2_;
  ad::Var<T> queries_;
};

// Ablation stand-in for the palette branch: C learned colours, image-independent.
template <class T>
class FixedPalette {
 public:
  FixedPalette() = default;
  FixedPalette(ParameterList<T>& params, int colours, Rng& rng)
  {
    logits_ = params.add("palette.centroids", normal_tensor<T>({colours, 3}, 1.0, rng));
  }
  ad::Var<T> operator()(int batch) const { return ad::sigmoid(ad::broadcast_batch(logits_, batch)); }

 private:
  ad::Var<T> logits_;
};

template <class T>
class CQFormer {
 public:
  struct TrainPass {
    ad::Var<T> logits;     // [N, C, H, W]
    ad::Var<T> probs;      // [N, C, H, W]
    ad::Var<T> palette;    // [N, C, 3]
    ad::Var<T> quantised;  // [N, 3, H, W]
  };
  struct TestPass {
    Tensor<T> logits;
    std::vector<int> indices;  // N * H * W
    Tensor<T> palette;
    Tensor<T> quantised;
  };

  // Copies would alias parameter storage; use clone() for a deep copy.
  CQFormer(const CQFormer&) = delete;
  CQFormer& operator=(const CQFormer&) = delete;
  CQFormer(CQFormer&&) noexcept = default;
  CQFormer& operator=(CQFormer&&) noexcept = default;

  CQFormer(CQFormerConfig cfg, std::uint64_t seed) : cfg_(cfg)
  {
    if (cfg.colours < 1) throw ConfigError("CQFormer: colour count must be >= 1");
    if (cfg.query_dim < 2 || cfg.query_dim % 2) throw ConfigError("CQFormer: query dimension must be even and >= 2");
    if (cfg.encoder_width < 1) throw ConfigError("CQFormer: encoder width must be >= 1");
    Rng rng(seed);
    encoder_ = AnnotationEncoder<T>(params_, cfg.encoder_width, cfg.colours, rng);
    if (cfg.palette == PaletteMode::attention)
      palette_ = PaletteBranch<T>(params_, cfg.colours, cfg.query_dim, rng);
    else
      fixed_ = FixedPalette<T>(params_, cfg.colours, rng);
  }

  const CQFormerConfig& config() const noexcept { return cfg_; }
  int colours() const noexcept { return cfg_.colours; }
  ParameterList<T>& parameters() noexcept { return params_; }
  const ParameterList<T>& parameters() const noexcept { return params_; }

  // x: [N, 3, H, W] pixels in [0, 1]; H, W >= 4.
  TrainPass forward_train(const Tensor<T>& x, T tau) const
  {
    if (!(tau > 0)) throw ConfigError("forward_train: temperature must be positive");
    auto [logits, palette] = branches(x);
    auto probs = ad::softmax(logits, 1, T(1) / tau);
    return {logits, probs, palette, mix(probs, palette)};
  }

  TestPass forward_test(const Tensor<T>& x) const
  {
    ad::NoGradGuard guard;
    auto [logits, palette] = branches(x);
    const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    TestPass out{logits.value(), std::vector<int>(n * plane), palette.value(), Tensor<T>({n, 3, h, w})};
    for (int b = 0; b < n; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        for (int k = 1; k < c; ++k)
          if (out.logits[(b * c + k) * plane + p] > out.logits[(b * c + best) * plane + p]) best = k;
        out.indices[b * plane + p] = best;
        for (int ch = 0; ch < 3; ++ch)
          out.quantised[(b * 3 + ch) * plane + p] = out.palette[(b * c + best) * 3 + ch];
      }
    return out;
  }

  ActivationMap activation(const RGBImage& img) const
  {
    auto pass = forward_test(to_batch<T>(img));
    return activation_from(pass.logits, 0);
  }

  Palette palette(const RGBImage& img) const { return palette_from(forward_test(to_batch<T>(img)).palette, 0); }

  struct TrainResult {
    RGBImage quantised;
    ProbabilityMap probs;
    Palette palette;
  };
  struct TestResult {
    RGBImage quantised;
    IndexMap indices;
    Palette palette;
  };

  TrainResult quantise_train(const RGBImage& img, double tau) const
  {
    if (!(tau > 0)) throw ConfigError("quantise_train: temperature must be positive");
    if (tau >= 1.0) warn("quantise_train: temperature outside (0,1)");
    ad::NoGradGuard guard;
    auto pass = forward_train(to_batch<T>(img), static_cast<T>(tau));
    TrainResult out;
    out.palette = palette_from(pass.palette.value(), 0);
    out.probs = softmax_with_temperature(activation_from(pass.logits.value(), 0), tau);
    out.quantised = mix_palette(out.probs, out.palette);
    return out;
  }

  TestResult quantise_test(const RGBImage& img) const
  {
    auto pass = forward_test(to_batch<T>(img));
    TestResult out;
    out.palette = palette_from(pass.palette, 0);
    out.indices = IndexMap{img.height(), img.width(), pass.indices};
    out.quantised = apply_palette(out.indices, out.palette);
    return out;
  }

  CQFormer clone() const
  {
    CQFormer out(cfg_, 0);
    for (std::size_t i = 0; i < params_.items().size(); ++i)
      out.params_.items()[i].var.value() = params_.items()[i].var.value();
    return out;
  }

  // Adds one colour cloned from `parent`: the head output channel and the
  // reference query are copied and perturbed by N(0, noise^2).
  CQFormer expanded(int parent, double noise, Rng& rng) const
  {
    if (parent < 0 || parent >= cfg_.colours) throw ConfigError("expanded: parent colour out of range");
    CQFormerConfig next = cfg_;
    next.colours += 1;
    CQFormer out(next, 0);
    std::normal_distribution<double> jitter(0.0, noise);
    for (auto& dst : out.params_.items()) {
      const auto src = params_.find(dst.name);
      if (!src.defined()) throw ConfigError("expanded: missing parameter " + dst.name);
      const auto& sv = src.value();
      auto& dv = dst.var.value();
      if (sv.shape() == dv.shape()) {
        dv = sv;
        continue;
      }
      // Leading axis indexes colours for every colour-shaped tensor.
      const std::size_t row = sv.size() / static_cast<std::size_t>(sv.dim(0));
      std::copy(sv.storage().begin(), sv.storage().end(), dv.storage().begin());
      for (std::size_t i = 0; i < row; ++i)
        dv[sv.size() + i] = static_cast<T>(sv[parent * row + i] + jitter(rng));
    }
    return out;
  }

 private:
  std::pair<ad::Var<T>, ad::Var<T>> branches(const Tensor<T>& x) const
  {
    if (x.rank() != 4 || x.dim(1) != 3) throw InputError("CQFormer: expected [N, 3, H, W] input");
    const int h = x.dim(2), w = x.dim(3);
    if (h < 4 || w < 4) throw InputError("CQFormer: image smaller than 4x4");
    auto input = centre_pixels(ad::constant(reflect_pad_to_multiple(x, 4)));
    auto logits = ad::crop(encoder_(input), h, w);
    ad::Var<T> palette = cfg_.palette == PaletteMode::attention ? palette_(input) : fixed_(x.dim(0));
    return {logits, palette};
  }

  static ad::Var<T> mix(const ad::Var<T>& probs, const ad::Var<T>& palette)
  {
    const int n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    auto flat = ad::reshape(probs, {n, c, h * w});
    return ad::reshape(ad::bmm(ad::transpose12(palette), flat), {n, 3, h, w});
  }

  static ActivationMap activation_from(const Tensor<T>& logits, int b)
  {
    const int c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    ActivationMap a{h, w, c, std::vector<double>(static_cast<std::size_t>(h) * w * c)};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < c; ++k)
          a.data[(static_cast<std::size_t>(y) * w + x) * c + k] = static_cast<double>(logits.at(b, k, y, x));
    return a;
  }

  static Palette palette_from(const Tensor<T>& palette, int b)
  {
    const int c = palette.dim(1);
    Palette p;
    for (int k = 0; k < c; ++k) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + k) * 3;
      p.colours.push_back({static_cast<double>(palette[base]), static_cast<double>(palette[base + 1]),
                           static_cast<double>(palette[base + 2])});
    }
    return p;
  }

  CQFormerConfig cfg_;
  ParameterList<T> params_;
  AnnotationEncoder<T> encoder_;
  PaletteBranch<T> palette_;
  FixedPalette<T> fixed_;
};

}  // namespace cqlab
