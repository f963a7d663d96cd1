#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node. Ops record their parents and a
// backward closure only when at least one input requires a gradient, so
// inference under NoGradGuard builds no graph at all.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cqlab/tensor.hpp"

#if defined(__SSE__) || defined(_M_X64)
#include <pmmintrin.h>
#include <xmmintrin.h>
#define CQLAB_HAS_MXCSR 1
#endif

namespace cqlab::ad {

namespace detail {
inline bool& grad_mode()
{
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Flushes subnormal floats to zero for the guard's lifetime. Low-temperature
// softmax produces many subnormal probabilities and their arithmetic is
// dramatically slower on x86; results stay deterministic either way.
class FlushDenormalsGuard {
 public:
  FlushDenormalsGuard()
  {
#ifdef CQLAB_HAS_MXCSR
    saved_ = _mm_getcsr();
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
  }
  ~FlushDenormalsGuard()
  {
#ifdef CQLAB_HAS_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
  FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

 private:
  unsigned saved_ = 0;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad()
  {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>())
  {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  // Gradient buffer; allocated lazily and zero-filled.
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

  void zero_grad()
  {
    if (has_grad()) node_->grad.fill(T(0));
  }

  T item() const { return node_->value[0]; }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value)
{
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value)
{
  return Var<T>(std::move(value), true);
}

// Builds the result node of an op. The closure receives the result node and
// must accumulate into parents' gradients via ensure_grad().
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward)
{
  Var<T> out(std::move(value), false);
  if (!detail::grad_mode()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

// Reverse-mode sweep from a scalar root. Gradients accumulate into leaves.
template <class T>
void backward(const Var<T>& root)
{
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor<T>& g = root.node()->ensure_grad();
  g.fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Drop interior gradients and closures so the graph can be released.
  for (Node<T>* n : order) {
    if (n->backward) {
      n->grad = Tensor<T>();
      n->backward = nullptr;
      n->parents.clear();
    }
  }
}

}  // namespace cqlab::ad
