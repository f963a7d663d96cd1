#pragma once

// Differentiable tensor ops. Image tensors are NCHW; sequence tensors are
// [batch, length, features].

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "cqlab/autograd.hpp"

namespace cqlab::ad {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require(bool ok, const char* what)
{
  if (!ok) throw std::invalid_argument(what);
}

// Output columns [lo, hi) whose input index ox*stride - pad + kx is in range.
inline std::pair<int, int> valid_span(int out, int in, int stride, int pad, int kx)
{
  int lo = pad - kx > 0 ? (pad - kx + stride - 1) / stride : 0;
  int hi = (in - 1 + pad - kx) >= 0 ? (in - 1 + pad - kx) / stride + 1 : 0;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

template <class T>
void im2col(const T* x, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* col)
{
  const int cols = out_h * out_w;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
        const auto [lo, hi] = valid_span(out_w, width, stride, pad, kx);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * height + iy) * width - pad + kx;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1)
            std::copy(src + lo, src + hi, dst + lo);
          else
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride];
          std::fill(dst + hi, dst + out_w, T(0));
        }
      }
}

template <class T>
void col2im(const T* col, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* x)
{
  const int cols = out_h * out_w;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
        const auto [lo, hi] = valid_span(out_w, width, stride, pad, kx);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          T* dst = x + (static_cast<std::size_t>(c) * height + iy) * width - pad + kx;
          const T* src = row + oy * out_w;
          if (stride == 1)
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          else
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride] += src[ox];
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->ensure_grad() += self.grad;
    if (b.requires_grad()) b.node()->ensure_grad() += self.grad;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->ensure_grad() += self.grad;
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s)
{
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [a, s](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a)
{
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>({1}, s), {a}, [a](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    const T up = self.grad[0];
    for (auto& v : g.values()) v += up;
  });
}

template <class T>
Var<T> mean(const Var<T>& a)
{
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// Weighted sum of scalar vars: sum_i w_i * x_i.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& ws)
{
  detail::require(xs.size() == ws.size() && !xs.empty(), "weighted_sum: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) s += ws[i] * xs[i].item();
  return make_result<T>(Tensor<T>({1}, s), xs, [xs, ws](Node<T>& self) {
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (xs[i].requires_grad()) xs[i].node()->ensure_grad()[0] += ws[i] * self.grad[0];
  });
}

template <class T>
Var<T> relu(const Var<T>& a)
{
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) g[i] += self.grad[i];
  });
}

// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(const Var<T>& a)
{
  Tensor<T> out = a.value();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return make_result<T>(std::move(out), {a}, [a, inv_sqrt2](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    const auto& x = a.value();
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
      g[i] += self.grad[i] * (cdf + x[i] * pdf);
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a)
{
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
  auto y = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {a}, [a, y](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*y)[i] * (T(1) - (*y)[i]);
  });
}

// ------------------------------------------------------------------- reshaping

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape)
{
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// [N, A, B] -> [N, B, A]
template <class T>
Var<T> transpose12(const Var<T>& a)
{
  detail::require(a.value().rank() == 3, "transpose12: expects rank 3");
  const int n = a.dim(0), p = a.dim(1), q = a.dim(2);
  Tensor<T> out({n, q, p});
  const auto& x = a.value();
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < q; ++j)
        out[(static_cast<std::size_t>(b) * q + j) * p + i] = x[(static_cast<std::size_t>(b) * p + i) * q + j];
  return make_result<T>(std::move(out), {a}, [a, n, p, q](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < q; ++j)
          g[(static_cast<std::size_t>(b) * p + i) * q + j] += self.grad[(static_cast<std::size_t>(b) * q + j) * p + i];
  });
}

// [A, B] -> [N, A, B] by repetition.
template <class T>
Var<T> broadcast_batch(const Var<T>& a, int n)
{
  const std::size_t m = a.value().size();
  Shape shape{n};
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  Tensor<T> out(shape);
  for (int b = 0; b < n; ++b) std::copy_n(a.value().data(), m, out.data() + b * m);
  return make_result<T>(std::move(out), {a}, [a, n, m](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < m; ++i) g[i] += self.grad[b * m + i];
  });
}

// NCHW -> top-left crop to [N, C, h, w].
template <class T>
Var<T> crop(const Var<T>& a, int h, int w)
{
  const int n = a.dim(0), c = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (h == H && w == W) return a;
  detail::require(h <= H && w <= W, "crop: target larger than input");
  Tensor<T> out({n, c, h, w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(b, ch, y, x) = a.value().at(b, ch, y, x);
  return make_result<T>(std::move(out), {a}, [a, n, c, h, w](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) g.at(b, ch, y, x) += self.grad.at(b, ch, y, x);
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b)
{
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: spatial mismatch");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * plane, ca * plane, out.data() + i * (ca + cb) * plane);
    std::copy_n(b.value().data() + i * cb * plane, cb * plane, out.data() + (i * (ca + cb) + ca) * plane);
  }
  return make_result<T>(std::move(out), {a, b}, [a, b, n, ca, cb, plane](Node<T>& self) {
    const T* g = self.grad.data();
    if (a.requires_grad()) {
      T* ga = a.node()->ensure_grad().data();
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < ca * plane; ++k) ga[i * ca * plane + k] += g[i * (ca + cb) * plane + k];
    }
    if (b.requires_grad()) {
      T* gb = b.node()->ensure_grad().data();
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < cb * plane; ++k)
          gb[i * cb * plane + k] += g[(i * (ca + cb) + ca) * plane + k];
    }
  });
}

// ---------------------------------------------------------------- convolution

// x: [N, Ci, H, W], w: [Co, Ci, k, k], bias: [Co] (may be undefined).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad)
{
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == ci && w.dim(3) == k, "conv2d: weight shape mismatch");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  detail::require(oh > 0 && ow > 0, "conv2d: input too small");
  const int kk = ci * k * k, cols = oh * ow;
  Tensor<T> out({n, co, oh, ow});
  AlignedVector<T> col(static_cast<std::size_t>(kk) * cols);
  ConstMatMap<T> wm(w.value().data(), co, kk);
  for (int b = 0; b < n; ++b) {
    detail::im2col(x.value().data() + static_cast<std::size_t>(b) * ci * h * wd, ci, h, wd, k, stride, pad,
                   oh, ow, col.data());
    MatMap<T> om(out.data() + static_cast<std::size_t>(b) * co * cols, co, cols);
    om.noalias() = wm * ConstMatMap<T>(col.data(), kk, cols);
    if (bias.defined())
      for (int c = 0; c < co; ++c) om.row(c).array() += bias.value()[c];
  }
  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& self) {
    AlignedVector<T> col(static_cast<std::size_t>(kk) * cols);
    AlignedVector<T> dcol(x.requires_grad() ? col.size() : 0);
    ConstMatMap<T> wm(w.value().data(), co, kk);
    for (int b = 0; b < n; ++b) {
      ConstMatMap<T> gm(self.grad.data() + static_cast<std::size_t>(b) * co * cols, co, cols);
      if (w.requires_grad()) {
        detail::im2col(x.value().data() + static_cast<std::size_t>(b) * ci * h * wd, ci, h, wd, k, stride,
                       pad, oh, ow, col.data());
        MatMap<T> gw(w.node()->ensure_grad().data(), co, kk);
        gw.noalias() += gm * ConstMatMap<T>(col.data(), kk, cols).transpose();
      }
      if (bias.defined() && bias.requires_grad()) {
        auto& gb = bias.node()->ensure_grad();
        for (int c = 0; c < co; ++c) gb[c] += gm.row(c).sum();
      }
      if (x.requires_grad()) {
        MatMap<T> dc(dcol.data(), kk, cols);
        dc.noalias() = wm.transpose() * gm;
        detail::col2im(dcol.data(), ci, h, wd, k, stride, pad, oh, ow,
                       x.node()->ensure_grad().data() + static_cast<std::size_t>(b) * ci * h * wd);
      }
    }
  });
}

// Depth-wise k x k convolution, stride 1, same padding. w: [C, 1, k, k].
template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias)
{
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), k = w.dim(2), pad = k / 2;
  detail::require(w.dim(0) == c && w.dim(1) == 1, "depthwise_conv2d: weight shape mismatch");
  Tensor<T> out({n, c, h, wd});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wd; ++xx) {
          T acc = bias.defined() ? bias.value()[ch] : T(0);
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = xx - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += wv[(ch * k + ky) * k + kx] * xv.at(b, ch, iy, ix);
            }
          }
          out.at(b, ch, y, xx) = acc;
        }
  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& self) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    Tensor<T>* gx = x.requires_grad() ? &x.node()->ensure_grad() : nullptr;
    Tensor<T>* gw = w.requires_grad() ? &w.node()->ensure_grad() : nullptr;
    Tensor<T>* gb = bias.defined() && bias.requires_grad() ? &bias.node()->ensure_grad() : nullptr;
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < wd; ++xx) {
            const T go = self.grad.at(b, ch, y, xx);
            if (gb) (*gb)[ch] += go;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = y - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = xx - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                if (gw) (*gw)[(ch * k + ky) * k + kx] += go * xv.at(b, ch, iy, ix);
                if (gx) gx->at(b, ch, iy, ix) += go * wv[(ch * k + ky) * k + kx];
              }
            }
          }
  });
}

template <class T>
Var<T> upsample2x(const Var<T>& x)
{
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) out.at(b, ch, y, xx) = x.value().at(b, ch, y / 2, xx / 2);
  return make_result<T>(std::move(out), {x}, [x, n, c, h, w](Node<T>& self) {
    auto& g = x.node()->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx) g.at(b, ch, y / 2, xx / 2) += self.grad.at(b, ch, y, xx);
  });
}

template <class T>
Var<T> maxpool2x2(const Var<T>& x)
{
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  detail::require(h > 0 && w > 0, "maxpool2x2: input too small");
  Tensor<T> out({n, c, h, w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.value();
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx, ++o) {
          std::size_t best = 0;
          T bv = -std::numeric_limits<T>::infinity();
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx =
                  ((static_cast<std::size_t>(b) * x.dim(1) + ch) * x.dim(2) + 2 * y + dy) * x.dim(3) + 2 * xx + dx;
              if (xv[idx] > bv) {
                bv = xv[idx];
                best = idx;
              }
            }
          out[o] = bv;
          (*argmax)[o] = best;
        }
  return make_result<T>(std::move(out), {x}, [x, argmax](Node<T>& self) {
    auto& g = x.node()->ensure_grad();
    for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

// [N, C, H, W] -> [N, C]
template <class T>
Var<T> global_avg_pool(const Var<T>& x)
{
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({n, c});
  for (int i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t k = 0; k < plane; ++k) s += x.value()[i * plane + k];
    out[i] = s / static_cast<T>(plane);
  }
  return make_result<T>(std::move(out), {x}, [x, n, c, plane](Node<T>& self) {
    auto& g = x.node()->ensure_grad();
    for (int i = 0; i < n * c; ++i) {
      const T v = self.grad[i] / static_cast<T>(plane);
      for (std::size_t k = 0; k < plane; ++k) g[i * plane + k] += v;
    }
  });
}

// ------------------------------------------------------------ linear algebra

// x: [..., in] viewed as rows; w: [in, out]; bias: [out] (may be undefined).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias)
{
  const int in = w.dim(0), outf = w.dim(1);
  detail::require(x.shape().back() == in, "linear: feature mismatch");
  const int rows = static_cast<int>(x.value().size() / in);
  Shape shape = x.shape();
  shape.back() = outf;
  Tensor<T> out(shape);
  MatMap<T> om(out.data(), rows, outf);
  om.noalias() = ConstMatMap<T>(x.value().data(), rows, in) * ConstMatMap<T>(w.value().data(), in, outf);
  if (bias.defined())
    for (int r = 0; r < rows; ++r) om.row(r) += ConstMatMap<T>(bias.value().data(), 1, outf);
  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& self) {
    ConstMatMap<T> gm(self.grad.data(), rows, outf);
    if (x.requires_grad())
      MatMap<T>(x.node()->ensure_grad().data(), rows, in).noalias() +=
          gm * ConstMatMap<T>(w.value().data(), in, outf).transpose();
    if (w.requires_grad())
      MatMap<T>(w.node()->ensure_grad().data(), in, outf).noalias() +=
          ConstMatMap<T>(x.value().data(), rows, in).transpose() * gm;
    if (bias.defined() && bias.requires_grad())
      MatMap<T>(bias.node()->ensure_grad().data(), 1, outf) += gm.colwise().sum();
  });
}

// Batched matmul: a [N, M, K] x b [N, K, P] -> [N, M, P].
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b)
{
  detail::require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: shape mismatch");
  const int n = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
  Tensor<T> out({n, m, p});
  for (int i = 0; i < n; ++i)
    MatMap<T>(out.data() + static_cast<std::size_t>(i) * m * p, m, p).noalias() =
        ConstMatMap<T>(a.value().data() + static_cast<std::size_t>(i) * m * k, m, k) *
        ConstMatMap<T>(b.value().data() + static_cast<std::size_t>(i) * k * p, k, p);
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    for (int i = 0; i < n; ++i) {
      ConstMatMap<T> g(self.grad.data() + static_cast<std::size_t>(i) * m * p, m, p);
      if (a.requires_grad())
        MatMap<T>(a.node()->ensure_grad().data() + static_cast<std::size_t>(i) * m * k, m, k).noalias() +=
            g * ConstMatMap<T>(b.value().data() + static_cast<std::size_t>(i) * k * p, k, p).transpose();
      if (b.requires_grad())
        MatMap<T>(b.node()->ensure_grad().data() + static_cast<std::size_t>(i) * k * p, k, p).noalias() +=
            ConstMatMap<T>(a.value().data() + static_cast<std::size_t>(i) * m * k, m, k).transpose() * g;
    }
  });
}

// ------------------------------------------------------------------- softmax

// Softmax of (scale * x) along `axis`.
template <class T>
Var<T> softmax(const Var<T>& x, int axis, T scale_by = T(1))
{
  const auto& shape = x.shape();
  if (axis < 0) axis += static_cast<int>(shape.size());
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const int len = shape[axis];
  Tensor<T> out(shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < len; ++c) mx = std::max(mx, scale_by * xv[base + c * inner]);
      T s = 0;
      for (int c = 0; c < len; ++c) {
        const T e = std::exp(scale_by * xv[base + c * inner] - mx);
        out[base + c * inner] = e;
        s += e;
      }
      for (int c = 0; c < len; ++c) out[base + c * inner] /= s;
    }
  auto y = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& g = x.node()->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (int c = 0; c < len; ++c) dot += self.grad[base + c * inner] * (*y)[base + c * inner];
        for (int c = 0; c < len; ++c) {
          const std::size_t i = base + c * inner;
          g[i] += scale_by * (*y)[i] * (self.grad[i] - dot);
        }
      }
  });
}

// Mean cross-entropy of logits [N, K] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels)
{
  const int n = logits.dim(0), k = logits.dim(1);
  detail::require(static_cast<int>(labels.size()) == n, "cross_entropy: label count mismatch");
  auto probs = std::make_shared<Tensor<T>>(Shape{n, k});
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::out_of_range("cross_entropy: label out of range");
    const T* z = logits.value().data() + static_cast<std::size_t>(i) * k;
    T mx = *std::max_element(z, z + k);
    T s = 0;
    for (int c = 0; c < k; ++c) s += std::exp(z[c] - mx);
    const T lse = mx + std::log(s);
    loss += lse - z[labels[i]];
    for (int c = 0; c < k; ++c) (*probs)[static_cast<std::size_t>(i) * k + c] = std::exp(z[c] - lse);
  }
  loss /= static_cast<T>(n);
  return make_result<T>(Tensor<T>({1}, loss), {logits}, [=](Node<T>& self) {
    auto& g = logits.node()->ensure_grad();
    const T up = self.grad[0] / static_cast<T>(n);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < k; ++c) {
        const std::size_t idx = static_cast<std::size_t>(i) * k + c;
        g[idx] += up * ((*probs)[idx] - (c == labels[i] ? T(1) : T(0)));
      }
  });
}

// Mean squared error between two tensors of equal shape.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b)
{
  detail::require(a.shape() == b.shape(), "mse: shape mismatch");
  const std::size_t m = a.value().size();
  T s = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return make_result<T>(Tensor<T>({1}, s / static_cast<T>(m)), {a, b}, [=](Node<T>& self) {
    const T up = T(2) * self.grad[0] / static_cast<T>(m);
    Tensor<T>* ga = a.requires_grad() ? &a.node()->ensure_grad() : nullptr;
    Tensor<T>* gb = b.requires_grad() ? &b.node()->ensure_grad() : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
      const T d = up * (a.value()[i] - b.value()[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

}  // namespace cqlab::ad
