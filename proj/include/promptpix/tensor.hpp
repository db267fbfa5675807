#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A BasicTape owns every value produced during one evaluation; BasicTensor is
// a cheap handle (tape pointer + node index) into it. Operations are free
// functions (see ops.hpp) that record a value together with a backward rule.
// Backward traversal visits nodes in exact reverse of recording order.
//
// Tapes are single-threaded. Use one tape per thread.

#include <Eigen/Dense>

#include <array>
#include <atomic>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace promptpix {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixX<double>;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

template <typename Scalar>
class BasicTape;

namespace detail {
#ifdef NDEBUG
inline std::atomic<bool> finite_checks_flag{false};
#else
inline std::atomic<bool> finite_checks_flag{true};
#endif
}  // namespace detail

// Every recorded op verifies that finite inputs gave a finite output. On by
// default in debug builds.
inline bool finite_checks() { return detail::finite_checks_flag.load(std::memory_order_relaxed); }
inline void set_finite_checks(bool on) { detail::finite_checks_flag.store(on, std::memory_order_relaxed); }

template <typename Scalar>
class BasicTensor {
 public:
  using Matrix = MatrixX<Scalar>;

  BasicTensor() = default;

  bool valid() const { return tape_ != nullptr; }
  BasicTape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Matrix& value() const { return tape_->value(*this); }
  const Matrix& grad() const { return tape_->grad(*this); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  std::string shape_str() const { return shape_string(rows(), cols()); }

  // 1x1 tensors only.
  Scalar item() const {
    if (rows() != 1 || cols() != 1) {
      throw DimensionError("item() on non-scalar tensor " + shape_str());
    }
    return value()(0, 0);
  }

 private:
  friend class BasicTape<Scalar>;
  BasicTensor(BasicTape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class BasicTape {
 public:
  using Matrix = MatrixX<Scalar>;
  using Tensor = BasicTensor<Scalar>;
  // Called with the gradient flowing into the node and the node's own value.
  using BackwardRule = std::function<void(BasicTape&, const Matrix& out_grad, const Matrix& out_value)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;
  BasicTape(BasicTape&&) = delete;
  BasicTape& operator=(BasicTape&&) = delete;

  Tensor constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Tensor variable(Matrix value) { return push(std::move(value), true, nullptr); }
  Tensor leaf(Matrix value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

  Tensor scalar(Scalar v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Records the result of an operation. The rule is kept only when some
  // input requires a gradient.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, BackwardRule rule) {
    return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(rule));
  }

  Tensor record(Matrix value, std::span<const Tensor> inputs, BackwardRule rule) {
    bool needs = false;
    for (const Tensor& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id_].requires_grad;
    }
    if (finite_checks()) {
      bool inputs_finite = true;
      for (const Tensor& in : inputs) inputs_finite = inputs_finite && nodes_[in.id_].value.allFinite();
      if (inputs_finite && !value.allFinite()) {
        throw EvaluationError("non-finite value produced from finite inputs at node " +
                              std::to_string(nodes_.size()));
      }
    }
    return push(std::move(value), needs, needs ? std::move(rule) : BackwardRule{});
  }

  const Matrix& value(const Tensor& t) const {
    check_owned(t);
    return nodes_[t.id_].value;
  }

  bool requires_grad(const Tensor& t) const {
    check_owned(t);
    return nodes_[t.id_].requires_grad;
  }

  // Zero matrix if no gradient has reached the node yet.
  const Matrix& grad(const Tensor& t) {
    check_owned(t);
    Node& node = nodes_[t.id_];
    if (!node.requires_grad) throw std::logic_error("grad() on tensor without requires_grad");
    ensure_grad(node);
    return node.grad;
  }

  // Adds g into t's gradient; no-op for tensors that do not require one.
  template <typename Derived>
  void accumulate(const Tensor& t, const Eigen::MatrixBase<Derived>& g) {
    Node& node = nodes_[t.id_];
    if (!node.requires_grad) return;
    if (g.rows() != node.value.rows() || g.cols() != node.value.cols()) {
      throw DimensionError("gradient shape " + shape_string(g.rows(), g.cols()) + " does not match value " +
                           shape_string(node.value.rows(), node.value.cols()));
    }
    ensure_grad(node);
    node.grad += g;
  }

  // Seeds d(root)/d(root) = 1 and propagates to every node recorded before it.
  void backward(const Tensor& root) {
    check_owned(root);
    Node& r = nodes_[root.id_];
    if (r.value.rows() != 1 || r.value.cols() != 1) {
      throw DimensionError("backward() needs a scalar root, got " + shape_string(r.value.rows(), r.value.cols()));
    }
    if (!r.requires_grad) return;
    ensure_grad(r);
    r.grad(0, 0) += Scalar(1);
    for (std::size_t i = root.id_ + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.rule && node.has_grad) node.rule(*this, node.grad, node.value);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.grad = Matrix();
      n.has_grad = false;
    }
  }

  void clear() {
    nodes_.clear();
    nodes_.shrink_to_fit();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardRule rule;
  };

  Tensor push(Matrix value, bool requires_grad, BackwardRule rule) {
    if (value.size() == 0) throw DimensionError("tensors must have positive extents");
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(rule)});
    return Tensor(this, nodes_.size() - 1);
  }

  void check_owned(const Tensor& t) const {
    if (t.tape_ != this || t.id_ >= nodes_.size()) throw std::logic_error("tensor does not belong to this tape");
  }

  static void ensure_grad(Node& node) {
    if (!node.has_grad) {
      node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
      node.has_grad = true;
    }
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
};

using Tape = BasicTape<double>;
using Tensor = BasicTensor<double>;

}  // namespace promptpix
