#pragma once

// Dense row-major tensors with reverse-mode gradient propagation.
//
// A Tensor<T> is a shared handle to a node in a dynamically built tape.
// Operations (see ops.hpp) record a backward closure when gradients are
// enabled and at least one input carries them; backward() walks the tape
// in reverse topological order and accumulates gradients additively, so
// two backward passes through the same node sum their contributions.
//
// T is float for training and double for the oracle/finite-difference
// test mode; everything downstream is templated on it.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace lsnerf {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Thread-local switch mirroring the usual no-grad idiom: while a
// NoGradGuard is alive, ops produce plain values with no tape nodes.
inline int& grad_mode_depth() {
  thread_local int depth = 0;
  return depth;
}
inline bool grad_enabled() { return grad_mode_depth() == 0; }

struct NoGradGuard {
  NoGradGuard() { ++grad_mode_depth(); }
  ~NoGradGuard() { --grad_mode_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    return full(std::move(shape), T(0));
  }
  static Tensor full(Shape shape, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }
  static Tensor from(Shape shape, std::vector<T> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor::from: data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v) { return from({1}, {v}); }
  // A leaf that accumulates gradients, i.e. a trainable parameter.
  static Tensor param(Shape shape, std::vector<T> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  T* ptr() { return node_->value.data(); }
  const T* ptr() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("Tensor::item: tensor has " +
                                  std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  // Same values, cut off from the tape.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Reverse-mode sweep from a scalar root: seeds d(root)/d(root) = 1 and
  // accumulates into every reachable grad-requiring node.
  void backward() const {
    if (numel() != 1)
      throw std::invalid_argument("backward: root must be a scalar");
    node_->ensure_grad();
    node_->grad[0] += T(1);
    run_backward();
  }

  // Sweep using an externally supplied output gradient.
  void backward_with(const std::vector<T>& grad_out) const {
    if (static_cast<int64_t>(grad_out.size()) != numel())
      throw std::invalid_argument("backward_with: gradient size mismatch");
    node_->ensure_grad();
    for (size_t i = 0; i < grad_out.size(); ++i) node_->grad[i] += grad_out[i];
    run_backward();
  }

 private:
  void run_backward() const {
    // Iterative DFS post-order; processing the list in reverse gives a
    // valid reverse-topological order of the tape.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    struct Frame {
      TensorNode<T>* n;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        TensorNode<T>* p = f.n->parents[f.next_parent++].get();
        if (visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) {
        n->backward_fn(*n);
        // Interior gradients are consumed once propagated; only leaves
        // accumulate across backward passes.
        std::fill(n->grad.begin(), n->grad.end(), T(0));
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

// Helper used by every op: build the output node, wiring parents and the
// backward closure only when some input actually needs gradients.
template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> value,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(TensorNode<T>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool need = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) need = need || in.requires_grad();
  }
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

}  // namespace lsnerf
