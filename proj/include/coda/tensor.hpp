#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>

#include "coda/base.hpp"
#include "coda/rng.hpp"

namespace coda {

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// While alive, newly created tensors do not record the computation graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename S>
struct TensorNode {
  Shape shape;
  std::shared_ptr<Buffer<S>> data;
  Buffer<S> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t numel() const { return data ? data->size() : 0; }

  void ensure_grad() {
    if (grad.size() != numel()) grad.assign(numel(), S(0));
  }
};

/// Dense n-dimensional array of S (float or double) with optional reverse-mode
/// gradient tracking. Tensors are value handles onto shared immutable storage;
/// every operation returns a fresh tensor and never mutates its inputs. The
/// graph lives only as long as some handle references it: dropping the result
/// of a forward pass releases all intermediate buffers.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

  static Tensor full(Shape shape, S value) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::make_shared<Buffer<S>>(shape_numel(t.node_->shape), value);
    return t;
  }

  static Tensor scalar(S value) { return full({1}, value); }

  static Tensor from(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor init: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::make_shared<Buffer<S>>(values.begin(), values.end());
    return t;
  }

  static Tensor uniform(Shape shape, S lo, S hi, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (S& v : *t.node_->data) v = S(rng.uniform(double(lo), double(hi)));
    return t;
  }

  static Tensor gaussian(Shape shape, S mean, S stddev, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (S& v : *t.node_->data) v = S(rng.gaussian(double(mean), double(stddev)));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->numel(); }
  std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }

  std::span<const S> values() const { return {node_->data->data(), node_->data->size()}; }

  /// Mutable view of the raw storage. Reserved for leaf tensors (parameter
  /// updates, data loading); mutating an interior graph node invalidates any
  /// recorded backward functions.
  std::span<S> raw_data() { return {node_->data->data(), node_->data->size()}; }

  S value() const {
    if (numel() != 1) {
      throw ContractError("value(): tensor has " + std::to_string(numel()) + " elements");
    }
    return (*node_->data)[0];
  }

  S at(std::size_t flat_index) const { return (*node_->data)[flat_index]; }

  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const S> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->numel(), S(0));
  }

  /// Deep copy of values into an untracked tensor.
  Tensor clone_values() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = node_->shape;
    t.node_->data = std::make_shared<Buffer<S>>(*node_->data);
    return t;
  }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode<S>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

/// Create the result node of an op, recording parents and the backward rule
/// only when gradients are both enabled and needed.
template <typename S>
Tensor<S> make_result(Shape shape, Buffer<S> data,
                      std::vector<std::shared_ptr<TensorNode<S>>> parents,
                      std::function<void(TensorNode<S>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->data = std::make_shared<Buffer<S>>(std::move(data));
  bool track = grad_enabled();
  if (track) {
    track = false;
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>::wrap(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Accumulates into .grad of every tracked
/// tensor reachable from `loss`; repeated calls keep accumulating until the
/// caller zeroes the grads.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward(): loss must be scalar, has shape " +
                        shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root || !root->requires_grad) return;

  // Iterative post-order DFS; graphs can be deep (long chains of adds).
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next].get();
      ++next;
      if (p && p->requires_grad && seen.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are scratch for this sweep; only leaves accumulate across
  // repeated backward calls.
  for (TensorNode<S>* node : order) {
    if (node->backward_fn) node->grad.assign(node->numel(), S(0));
  }
  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

}  // namespace coda
