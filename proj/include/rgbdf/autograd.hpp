#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rgbdf/tensor.hpp"

namespace rgbdf {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for its lifetime (sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  /// Reads `self.grad` and accumulates into `self.inputs[i]->grad_buffer()`.
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && value.size() > 0) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in the computation graph.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad() { return node_->grad; }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(std::size_t i) const { return node_->value.dim(i); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T{});
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps an op result; records inputs and the backward closure only when a
/// gradient can flow.
template <class T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

/// Reverse-mode sweep from a scalar root (seeded with 1) or with an explicit seed gradient.
template <class T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = root.node()->grad_buffer();
  if (seed) {
    g += *seed;
  } else {
    if (root.value().size() != 1) throw InvalidArgument("backward() without seed needs a scalar root");
    g[0] += T{1};
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives.

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->grad_buffer() += self.grad;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "sub");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (Index i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->grad_buffer() += self.grad;
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "mul");
  Tensor<T> out = a.value();
  for (Index i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& av = self.inputs[0]->value;
    auto& bv = self.inputs[1]->value;
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc{};
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T s = self.grad[0];
    for (auto& v : g.values()) v += s;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const Index n = a.value().size();
  if (n == 0) throw InvalidArgument("mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  return make_result<T>(a.value().reshaped(std::move(shape)), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Sum of scalars.
template <class T>
Var<T> add_scalars(const std::vector<Var<T>>& terms) {
  if (terms.empty()) return Var<T>(Tensor<T>({1}, T{}));
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace rgbdf
