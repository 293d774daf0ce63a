#pragma once

// Reverse-mode automatic differentiation over matrix-valued nodes.
//
// Every node holds an Eigen matrix. Columns are independent samples (paths)
// unless an op says otherwise; there is no implicit broadcasting, so shapes
// are always explicit at the call site (see broadcast_cols/broadcast_rows).
// A tape is single-threaded. Distinct tapes may be used from distinct threads.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace sdevi::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives
/// and has not been truncated below the node.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::int32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  const Matrix& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

class Tape {
 public:
  /// Pushes the adjoint of node `self` (already accumulated) to its parents.
  using Backward = std::function<void(Tape&, std::int32_t self)>;

  /// A non-recording tape evaluates values only; no node ever needs a gradient.
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Matrix value);
  Var constant(double value);
  /// Differentiable leaf. On a non-recording tape this is a constant.
  Var variable(Matrix value);
  Var variable(double value);

  /// Appends an interior node. `backward` is stored only when some parent
  /// needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, std::span<const Var> parents, Backward backward);

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }
  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].value; }
  const Matrix& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& adjoint(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].adjoint; }

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.needs_grad) return;
    if (n.adjoint.size() == 0) {
      n.adjoint = g;
    } else {
      n.adjoint += g;
    }
  }

  /// adjoint(v) += a * b without a temporary.
  template <typename A, typename B>
  void accumulate_product(Var v, const A& a, const B& b) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.needs_grad) return;
    if (n.adjoint.size() == 0) {
      n.adjoint.noalias() = a * b;
    } else {
      n.adjoint.noalias() += a * b;
    }
  }

  /// Adds g into the block of v's adjoint starting at (row, col).
  template <typename Derived>
  void accumulate_block(Var v, Eigen::Index row, Eigen::Index col, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.needs_grad) return;
    if (n.adjoint.size() == 0) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
    n.adjoint.block(row, col, g.rows(), g.cols()) += g;
  }

  /// Reverse sweep from a 1x1 node. Throws ContractError for other shapes.
  void backward(Var out);

  /// Adjoint after backward(); zeros of the node's shape when unreached.
  Matrix grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  /// Drops every node with index >= n.
  void truncate(std::size_t n);

 private:
  struct Node {
    Matrix value;
    Matrix adjoint;
    Backward backward;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad, Backward backward);

  std::vector<Node> nodes_;
  bool recording_;
};

// Elementwise arithmetic. Operands must have identical shapes.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(double c, Var a);
Var operator*(Var a, double c);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var square(Var a);
/// (1 - e^{-z}) / z, continuous through z = 0.
Var phi1(Var z);
/// Identity for y >= tau; below tau an exponential knee that decays to `floor`
/// with matching value and slope at tau. Requires tau > floor elementwise.
Var soft_floor(Var y, Var tau, double floor);

/// W X + b 1^T with W (out x in), X (in x B), b (out x 1). `b` may be invalid.
Var affine(Var weight, Var bias, Var input);
/// Constant-matrix product M X (M is not differentiated).
Var matmul_const(const Matrix& m, Var input);
/// Scales row r of X by c[r].
Var mul_rows_const(Var input, const Eigen::VectorXd& c);

Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var rows(Var a, Eigen::Index start, Eigen::Index count);
Var col(Var a, Eigen::Index j);
/// (n x 1) -> (n x cols)
Var broadcast_cols(Var a, Eigen::Index cols);
/// (1 x B) -> (rows x B)
Var broadcast_rows(Var a, Eigen::Index rows);
/// Sum of all entries as a 1x1 node.
Var sum(Var a);

/// Scalar helpers shared by taped and untaped evaluation so both round alike.
double phi1_value(double z);
double phi1_derivative(double z);
/// Elementwise tanh via one vectorized exp; absolute error below 4e-16.
Matrix tanh_values(const Matrix& x);

}  // namespace sdevi::ad
