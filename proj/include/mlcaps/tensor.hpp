#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mlcaps/errors.hpp"

namespace mlcaps {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Handle to a node of the define-by-run graph. Copies share the node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using node_type = Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<node_type>()) {
    check_extents(shape);
    node_->data.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<node_type>()) {
    check_extents(shape);
    if (shape_size(shape) != data.size())
      throw dimension_error("tensor: shape " + shape_str(shape) + " holds " +
                            std::to_string(shape_size(shape)) + " values, got " +
                            std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  explicit Tensor(std::shared_ptr<node_type> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutation is reserved for parameters (initialization, optimizer steps) and
  // freshly built inputs; never for tensors that already feed a graph.
  std::span<T> mutable_data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }

  T item() const {
    if (size() != 1) throw dimension_error("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  T operator[](std::size_t flat) const { return node_->data[flat]; }

  // A non-differentiable view of the same values.
  Tensor detach() const {
    auto n = std::make_shared<node_type>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->op = "detach";
    return Tensor(std::move(n));
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()));
  }

  const std::shared_ptr<node_type>& node() const { return node_; }

 private:
  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw dimension_error("tensor: rank must be >= 1");
    for (auto e : shape)
      if (e == 0) throw dimension_error("tensor: zero extent in " + shape_str(shape));
  }

  std::shared_ptr<node_type> node_;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the output node of a differentiable op. The graph edge is recorded
// only when at least one input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  auto& node = *out.node();
  node.op = std::move(op);
  bool needs = false;
  if (grad_mode_flag())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node.requires_grad = true;
    for (auto& in : inputs) node.parents.push_back(in.node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

// Graph nodes reachable from root, every node after all nodes it consumes.
template <typename T>
std::vector<Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Reverse-mode sweep. Leaf grads accumulate across calls; interior grads are
// reset so that a second call on the same graph adds exactly one more copy.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw dimension_error("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf() && !n->grad.empty()) n->backward_fn(*n);
  }
}

// Name and shape of the first node (in execution order) holding NaN or Inf.
template <typename T>
std::string first_nonfinite(const Tensor<T>& root) {
  std::vector<const Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<const Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Node<T>* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (const auto* n : order) {
    for (T v : n->data)
      if (!std::isfinite(v)) return n->op + " " + shape_str(n->shape);
  }
  return {};
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace mlcaps
