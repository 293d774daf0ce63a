#include "sdevi/tape.hpp"

#include "sdevi/errors.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace sdevi::ad {

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("Var::scalar on a non-1x1 node");
  return v(0, 0);
}

Var Tape::push(Matrix value, bool needs_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::variable(Matrix value) { return push(std::move(value), recording_, nullptr); }

Var Tape::variable(double value) { return variable(Matrix::Constant(1, 1, value)); }

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  bool any = false;
  if (recording_) {
    for (const Var& p : parents) {
      if (p.valid() && needs_grad(p)) {
        any = true;
        break;
      }
    }
  }
  return push(std::move(value), any, any ? std::move(backward) : nullptr);
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw ContractError("backward: node belongs to another tape");
  const Matrix& v = value(out);
  if (v.rows() != 1 || v.cols() != 1) {
    throw ContractError("backward: output must be a 1x1 node, got " + std::to_string(v.rows()) + "x" +
                        std::to_string(v.cols()));
  }
  for (Node& n : nodes_) n.adjoint.resize(0, 0);
  Node& root = nodes_[static_cast<std::size_t>(out.id())];
  if (!root.needs_grad) return;
  root.adjoint = Matrix::Ones(1, 1);
  for (std::int32_t i = out.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.adjoint.size() == 0 || !n.backward) continue;
    n.backward(*this, i);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

void Tape::truncate(std::size_t n) {
  if (n < nodes_.size()) nodes_.resize(n);
}

// ---------------------------------------------------------------------------
// Elementwise ops

Var operator+(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var operator-(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var operator*(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    tp.accumulate(a, g.cwiseProduct(b.value()));
    tp.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var operator/(Var a, Var b) {
  require_same_shape(a, b, "div");
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseQuotient(b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    const Matrix& y = tp.value(self);
    Matrix ga = g.cwiseQuotient(b.value());
    tp.accumulate(b, -ga.cwiseProduct(y));
    tp.accumulate(a, ga);
  });
}

Var operator-(Var a) {
  Tape& t = *a.tape();
  return t.record(-a.value(), {a}, [a](Tape& tp, std::int32_t self) { tp.accumulate(a, -tp.adjoint(self)); });
}

Var operator*(double c, Var a) {
  Tape& t = *a.tape();
  return t.record(c * a.value(), {a}, [a, c](Tape& tp, std::int32_t self) { tp.accumulate(a, c * tp.adjoint(self)); });
}

Var operator*(Var a, double c) { return c * a; }

Var operator+(Var a, double c) {
  Tape& t = *a.tape();
  Matrix out = a.value().array() + c;
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) { tp.accumulate(a, tp.adjoint(self)); });
}

Var operator+(double c, Var a) { return a + c; }

Var operator-(Var a, double c) { return a + (-c); }

Var operator-(double c, Var a) {
  Tape& t = *a.tape();
  Matrix out = c - a.value().array();
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) { tp.accumulate(a, -tp.adjoint(self)); });
}

Var exp(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().unaryExpr([](double v) { return std::exp(v); });
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) {
    tp.accumulate(a, tp.adjoint(self).cwiseProduct(tp.value(self)));
  });
}

Var log(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().unaryExpr([](double v) { return std::log(v); });
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) {
    tp.accumulate(a, tp.adjoint(self).cwiseQuotient(a.value()));
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  Matrix out = tanh_values(a.value());
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) {
    const Matrix& y = tp.value(self);
    tp.accumulate(a, (tp.adjoint(self).array() * (1.0 - y.array().square())).matrix());
  });
}

Var square(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().cwiseAbs2(), {a}, [a](Tape& tp, std::int32_t self) {
    tp.accumulate(a, 2.0 * tp.adjoint(self).cwiseProduct(a.value()));
  });
}

Matrix tanh_values(const Matrix& x) {
  // |x| > 20 rounds to +-1 anyway; the clamp keeps exp finite
  return (1.0 - 2.0 / (1.0 + (2.0 * x.array().min(20.0).max(-20.0)).exp())).matrix();
}

double phi1_value(double z) {
  if (z == 0.0) return 1.0;
  if (std::abs(z) < 1e-8) return 1.0 - 0.5 * z + z * z / 6.0;
  return -std::expm1(-z) / z;
}

double phi1_derivative(double z) {
  if (std::abs(z) < 0.1) {
    // sum_{n>=1} (-1)^n n z^{n-1} / (n+1)!
    double term_pow = 1.0;
    double fact = 2.0;
    double acc = 0.0;
    for (int n = 1; n <= 10; ++n) {
      const double sign = (n % 2 == 1) ? -1.0 : 1.0;
      acc += sign * n * term_pow / fact;
      term_pow *= z;
      fact *= (n + 2);
    }
    return acc;
  }
  return (std::exp(-z) - phi1_value(z)) / z;
}

Var phi1(Var z) {
  Tape& t = *z.tape();
  Matrix out = z.value().unaryExpr([](double v) { return phi1_value(v); });
  return t.record(std::move(out), {z}, [z](Tape& tp, std::int32_t self) {
    Matrix d = z.value().unaryExpr([](double v) { return phi1_derivative(v); });
    tp.accumulate(z, tp.adjoint(self).cwiseProduct(d));
  });
}

Var soft_floor(Var y, Var tau, double floor) {
  require_same_shape(y, tau, "soft_floor");
  Tape& t = *y.tape();
  const Matrix& yv = y.value();
  const Matrix& tv = tau.value();
  Matrix out(yv.rows(), yv.cols());
  for (Eigen::Index j = 0; j < yv.cols(); ++j) {
    for (Eigen::Index i = 0; i < yv.rows(); ++i) {
      const double yi = yv(i, j);
      const double ti = tv(i, j);
      if (yi >= ti) {
        out(i, j) = yi;
      } else {
        const double w = ti - floor;
        out(i, j) = floor + w * std::exp((yi - ti) / w);
      }
    }
  }
  return t.record(std::move(out), {y, tau}, [y, tau, floor](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    const Matrix& yv = y.value();
    const Matrix& tv = tau.value();
    Matrix gy(g.rows(), g.cols());
    Matrix gt(g.rows(), g.cols());
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double yi = yv(i, j);
        const double ti = tv(i, j);
        if (yi >= ti) {
          gy(i, j) = g(i, j);
          gt(i, j) = 0.0;
        } else {
          // out = f + w e^{s}, w = tau - f, s = (y - tau)/w
          const double w = ti - floor;
          const double s = (yi - ti) / w;
          const double e = std::exp(s);
          gy(i, j) = g(i, j) * e;
          gt(i, j) = g(i, j) * (e - e * (1.0 + s));
        }
      }
    }
    tp.accumulate(y, gy);
    tp.accumulate(tau, gt);
  });
}

// ---------------------------------------------------------------------------
// Linear maps and reshaping

Var affine(Var weight, Var bias, Var input) {
  const Matrix& w = weight.value();
  const Matrix& x = input.value();
  if (w.cols() != x.rows()) {
    throw ContractError("affine: weight has " + std::to_string(w.cols()) + " columns, input has " +
                        std::to_string(x.rows()) + " rows");
  }
  Matrix out = w * x;
  if (bias.valid()) {
    if (bias.rows() != w.rows() || bias.cols() != 1) throw ContractError("affine: bias must be (out x 1)");
    out.colwise() += bias.value().col(0);
  }
  Tape& t = *input.tape();
  return t.record(std::move(out), {weight, bias, input}, [weight, bias, input](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    tp.accumulate_product(input, weight.value().transpose(), g);
    tp.accumulate_product(weight, g, input.value().transpose());
    if (bias.valid() && tp.needs_grad(bias)) tp.accumulate(bias, g.rowwise().sum());
  });
}

Var matmul_const(const Matrix& m, Var input) {
  if (m.cols() != input.rows()) throw ContractError("matmul_const: inner dimension mismatch");
  Tape& t = *input.tape();
  return t.record(m * input.value(), {input}, [m, input](Tape& tp, std::int32_t self) {
    tp.accumulate(input, m.transpose() * tp.adjoint(self));
  });
}

Var mul_rows_const(Var input, const Eigen::VectorXd& c) {
  if (c.size() != input.rows()) throw ContractError("mul_rows_const: length mismatch");
  Tape& t = *input.tape();
  Matrix out = input.value().array().colwise() * c.array();
  return t.record(std::move(out), {input}, [input, c](Tape& tp, std::int32_t self) {
    tp.accumulate(input, (tp.adjoint(self).array().colwise() * c.array()).matrix());
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ContractError("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  Tape& t = *parts.front().tape();
  return t.record(std::move(out), parts, [owned](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.adjoint(self);
    Eigen::Index r0 = 0;
    for (const Var& p : owned) {
      const Eigen::Index n = p.rows();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(r0, n));
      r0 += n;
    }
  });
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ContractError("rows: range out of bounds");
  Tape& t = *a.tape();
  return t.record(a.value().middleRows(start, count), {a}, [a, start](Tape& tp, std::int32_t self) {
    tp.accumulate_block(a, start, 0, tp.adjoint(self));
  });
}

Var col(Var a, Eigen::Index j) {
  if (j < 0 || j >= a.cols()) throw ContractError("col: index out of bounds");
  Tape& t = *a.tape();
  return t.record(a.value().col(j), {a}, [a, j](Tape& tp, std::int32_t self) {
    tp.accumulate_block(a, 0, j, tp.adjoint(self));
  });
}

Var broadcast_cols(Var a, Eigen::Index cols) {
  if (a.cols() != 1) throw ContractError("broadcast_cols: input must be a column");
  Tape& t = *a.tape();
  Matrix out = a.value().replicate(1, cols);
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) {
    tp.accumulate(a, tp.adjoint(self).rowwise().sum());
  });
}

Var broadcast_rows(Var a, Eigen::Index rows_out) {
  if (a.rows() != 1) throw ContractError("broadcast_rows: input must be a row");
  Tape& t = *a.tape();
  Matrix out = a.value().replicate(rows_out, 1);
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) {
    tp.accumulate(a, tp.adjoint(self).colwise().sum());
  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return t.record(std::move(out), {a}, [a](Tape& tp, std::int32_t self) {
    tp.accumulate(a, Matrix::Constant(a.rows(), a.cols(), tp.adjoint(self)(0, 0)));
  });
}

}  // namespace sdevi::ad
