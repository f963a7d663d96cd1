#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cqlab/ops.hpp"

namespace cqlab {

using Rng = std::mt19937_64;

template <class T>
struct NamedParameter {
  std::string name;
  ad::Var<T> var;
};

// Ordered registry of trainable tensors. Order is construction order and is
// what checkpoints and optimisers iterate over.
template <class T>
class ParameterList {
 public:
  ad::Var<T> add(std::string name, Tensor<T> init)
  {
    auto v = ad::parameter(std::move(init));
    items_.push_back({std::move(name), v});
    return v;
  }

  std::vector<NamedParameter<T>>& items() noexcept { return items_; }
  const std::vector<NamedParameter<T>>& items() const noexcept { return items_; }

  ad::Var<T> find(const std::string& name) const
  {
    for (const auto& p : items_)
      if (p.name == name) return p.var;
    return {};
  }

  std::size_t count() const
  {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.var.value().size();
    return n;
  }

  void zero_grad()
  {
    for (auto& p : items_) p.var.zero_grad();
  }

  void append(const ParameterList& other)
  {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
  }

 private:
  std::vector<NamedParameter<T>> items_;
};

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng)
{
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterList<T>& params, const std::string& name, int in, int out, int kernel, int stride, Rng& rng)
      : stride_(stride), pad_(kernel / 2)
  {
    const double fan_in = static_cast<double>(in) * kernel * kernel;
    weight_ = params.add(name + ".weight", normal_tensor<T>({out, in, kernel, kernel}, std::sqrt(2.0 / fan_in), rng));
    bias_ = params.add(name + ".bias", Tensor<T>({out}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::conv2d(x, weight_, bias_, stride_, pad_); }
  ad::Var<T> weight() const { return weight_; }

 private:
  ad::Var<T> weight_, bias_;
  int stride_ = 1, pad_ = 0;
};

template <class T>
class DepthwiseConv2d {
 public:
  DepthwiseConv2d() = default;
  DepthwiseConv2d(ParameterList<T>& params, const std::string& name, int channels, int kernel, Rng& rng)
  {
    weight_ = params.add(name + ".weight",
                         normal_tensor<T>({channels, 1, kernel, kernel}, std::sqrt(1.0 / (kernel * kernel)), rng));
    bias_ = params.add(name + ".bias", Tensor<T>({channels}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::depthwise_conv2d(x, weight_, bias_); }

 private:
  ad::Var<T> weight_, bias_;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterList<T>& params, const std::string& name, int in, int out, Rng& rng, bool with_bias = true)
  {
    weight_ = params.add(name + ".weight", normal_tensor<T>({in, out}, std::sqrt(1.0 / in), rng));
    if (with_bias) bias_ = params.add(name + ".bias", Tensor<T>({out}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::linear(x, weight_, bias_); }

 private:
  ad::Var<T> weight_, bias_;
};

// Maps [0,1] pixels to [-1,1] for network inputs.
template <class T>
ad::Var<T> centre_pixels(const ad::Var<T>& x)
{
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T(2) * v - T(1);
  return ad::make_result<T>(std::move(out), {x}, [x](ad::Node<T>& self) {
    auto& g = x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * self.grad[i];
  });
}

}  // namespace cqlab
