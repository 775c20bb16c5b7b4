#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sit {

using Index = Eigen::Index;

/// Row-major dense matrix; every tensor in the library is rank <= 2.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on NaN/Inf where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename A, typename B>
std::string shapes_string(const A& a, const B& b) {
  return shape_string(a.rows(), a.cols()) + " and " + shape_string(b.rows(), b.cols());
}

namespace detail {

inline thread_local bool grad_mode_enabled = true;

template <typename Scalar>
struct Node {
  Mat<Scalar> value;
  Mat<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents that require grad.
  std::function<void(Node&)> backward;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

/// A node handle in a reverse-mode autodiff graph. Copies share the node.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Matrix = Mat<Scalar>;
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tensor() = default;

  static Tensor constant(Matrix value) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    return Tensor(std::move(node));
  }

  static Tensor parameter(Matrix value) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Tensor(std::move(node));
  }

  static Tensor scalar(Scalar v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// Direct access for optimizers and loaders. Never mutate a value that is
  /// part of a live graph.
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() {
    if (node_->grad.size() == 0) node_->grad = Matrix::Zero(rows(), cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() requires a 1x1 tensor, got " + shape_string(rows(), cols()));
    return node_->value(0, 0);
  }

  /// Same value, cut from the graph.
  Tensor detach() const { return constant(value()); }

  /// Seeds d(self)/d(self) = 1 and propagates to every reachable node.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar, got " + shape_string(rows(), cols()));
    if (!node_->requires_grad) return;

    std::vector<detail::Node<Scalar>*> order;
    std::unordered_set<detail::Node<Scalar>*> visited;
    std::vector<std::pair<detail::Node<Scalar>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node<Scalar>* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    node_->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<Scalar>* node = *it;
      if (node->backward && node->grad.size() != 0) node->backward(*node);
    }
  }

  const NodePtr& node() const { return node_; }

  /// Builds an op result. Records parents and the backward rule only when
  /// grad mode is on and some input requires grad.
  static Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                            std::function<void(detail::Node<Scalar>&)> backward) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    if (detail::grad_mode_enabled) {
      bool any = false;
      for (const auto& t : inputs) any = any || t.requires_grad();
      if (any) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (auto& t : inputs) node->parents.push_back(t.node_);
        node->backward = std::move(backward);
      }
    }
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace sit
