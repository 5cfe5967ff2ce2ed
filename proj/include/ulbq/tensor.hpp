#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ulbq {

using Shape = std::vector<std::size_t>;

template <typename T>
using Array = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void throw_shape_error(const std::string& op, const Shape& a,
                                           const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

template <typename T>
struct Node {
  Shape shape;
  Array<T> value;
  Array<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Array<T>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

/// Handle to a node of the autodiff graph. Copies share the node, so a
/// parameter tensor updated in place is seen by every holder.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, Array<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != static_cast<std::size_t>(values.size())) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, Array<T>::Zero(shape_numel(shape)), requires_grad);
  }

  static Tensor full(const Shape& shape, T v, bool requires_grad = false) {
    return Tensor(shape, Array<T>::Constant(shape_numel(shape), v),
                  requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, Array<T>::Constant(1, v), requires_grad);
  }

  static Tensor from_matrix(const Matrix<T>& m, bool requires_grad = false) {
    Array<T> flat = Eigen::Map<const Array<T>>(m.data(), m.size());
    return Tensor(Shape{static_cast<std::size_t>(m.rows()),
                        static_cast<std::size_t>(m.cols())},
                  std::move(flat), requires_grad);
  }

  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return static_cast<std::size_t>(node_->value.size()); }

  const Array<T>& value() const { return node_->value; }
  /// In-place access for optimizers and initializers; never use on tensors
  /// that already feed a recorded graph you still intend to differentiate.
  Array<T>& mutable_value() { return node_->value; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[static_cast<Eigen::Index>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Array<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), value(), false); }

  /// Row-major matrix view: leading extents collapsed, last extent as columns.
  Eigen::Map<const Matrix<T>> matrix() const {
    const auto cols = rank() == 0 ? 1 : shape().back();
    const auto rows = cols == 0 ? 0 : numel() / cols;
    return {node_->value.data(), static_cast<Eigen::Index>(rows),
            static_cast<Eigen::Index>(cols)};
  }

  Matrix<T> to_matrix() const { return matrix(); }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds an op result; records the backward closure only when some input
/// participates in the tape.
template <typename T>
Tensor<T> make_result(Shape shape, Array<T> value,
                      std::initializer_list<Tensor<T>> inputs, const char* op,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.op = op;
    for (const auto& in : inputs) n.parents.push_back(in.node());
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node with requires_grad; call zero_grad on parameters between
/// sweeps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior nodes start each sweep clean; leaves keep accumulating.
  for (auto* n : order) {
    if (!n->parents.empty()) n->grad.resize(0);
  }
  loss.node()->accumulate(Array<T>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

}  // namespace ulbq
