#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable node. Operations on tensors that
// require gradients record a backward closure on the result node; the set of
// nodes reachable from a scalar loss forms the tape that backward() replays in
// reverse topological order. A tape is single-use: backward() releases every
// interior node it visited.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace atx {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of inputs that
  // require them.
  std::function<void(Node&)> backward;

  // Grad buffer of input i, or nullptr when that input is not tracked.
  std::vector<double>* input_grad(std::size_t i) {
    Node& in = *inputs[i];
    return in.requires_grad ? &in.grad : nullptr;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false) {
    return Tensor(Shape{values.size()}, std::vector<double>(values), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }

  std::span<const double> grad() const {
    if (node_->grad.empty()) throw TapeError("grad: tensor has no gradient (was backward called?)");
    return node_->grad;
  }

  // Gradient as a tensor of the same shape.
  Tensor grad_tensor() const { return Tensor(shape(), std::vector<double>(grad().begin(), grad().end())); }

  // Fresh untracked leaf sharing nothing with this tensor.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  // Fresh tracked leaf holding a copy of this tensor's values.
  Tensor tracked() const { return Tensor(shape(), node_->value, true); }

  // In-place access for leaves only (optimizer updates, weight loading).
  std::span<double> mutable_data() {
    if (!node_->leaf) throw TapeError("mutable_data: only leaf tensors may be modified in place");
    return node_->value;
  }

  void set_requires_grad(bool on) {
    if (!node_->leaf) throw TapeError("set_requires_grad: only valid on leaves");
    node_->requires_grad = on;
  }

  void clear_grad() { node_->grad.clear(); }

  Tensor reshaped_copy(Shape shape) const { return Tensor(std::move(shape), node_->value); }

  // Identity of the underlying node.
  const void* id() const { return node_.get(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void require_finite(std::string_view op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": non-finite input value");
    }
  }
}

inline void require_finite_output(std::string_view op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string(op) + ": non-finite result");
  }
}

// Builds a result node. When any input is tracked the backward closure is
// attached and the inputs are retained for the tape.
template <class Backward>
Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                   std::initializer_list<Tensor> inputs, Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool tracked = false;
  for (const Tensor& in : inputs) tracked = tracked || in.requires_grad();
  if (tracked) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor(std::move(node));
}

template <class Backward>
Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                   const std::vector<Tensor>& inputs, Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool tracked = false;
  for (const Tensor& in : inputs) tracked = tracked || in.requires_grad();
  if (tracked) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

// Populates grad on every tracked leaf reachable from `loss` with d(loss)/d(leaf).
// Leaf gradients are overwritten, not accumulated across calls. The tape is
// consumed: a second backward through the same nodes throws TapeError.
inline void backward(const Tensor& loss) {
  using detail::Node;
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) throw TapeError("backward: no tracked inputs reach the loss");
  if (root->consumed) throw TapeError("backward: tape already consumed");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw TapeError("backward: tape already consumed");
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->backward = nullptr;
    n->inputs.clear();
    n->consumed = true;
  }
  if (root->leaf) root->consumed = false;
}

}  // namespace atx
