#pragma once

// Three-layer tanh networks and the gradient-check utility.

#include "sdevi/tape.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sdevi {

/// Hidden width used for every network in the model.
inline constexpr Eigen::Index kHiddenWidth = 128;

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::MatrixXd bias;    // out x 1
};

/// affine -> tanh -> affine -> tanh -> affine. Always exactly three weight layers.
class DenseNet {
 public:
  DenseNet() = default;

  /// dims = {d_in, hidden, hidden, d_out}. Weights and biases are drawn
  /// uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a generator seeded by
  /// `seed`. With zero_last the output layer is exactly zero.
  static DenseNet init(std::vector<Eigen::Index> dims, std::uint64_t seed, bool zero_last);

  /// Rebuilds a network from explicit layers (checkpoint loading).
  static DenseNet from_layers(std::vector<DenseLayer> layers);

  const std::vector<Eigen::Index>& dims() const { return dims_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  Eigen::Index input_dim() const { return dims_.front(); }
  Eigen::Index output_dim() const { return dims_.back(); }
  bool empty() const { return layers_.empty(); }

  std::size_t parameter_count() const;
  /// Parameters in layer order, each weight row-major then its bias.
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);

  /// Batched evaluation; one sample per column.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& input) const;
  Eigen::VectorXd forward(const Eigen::VectorXd& input) const;

 private:
  std::vector<Eigen::Index> dims_;
  std::vector<DenseLayer> layers_;
};

/// Network parameters placed on a tape as leaves (trainable) or constants.
struct BoundNet {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
};

BoundNet bind(ad::Tape& tape, const DenseNet& net, bool trainable);

/// Taped evaluation; identical values to DenseNet::forward on the same input.
ad::Var forward(const BoundNet& net, ad::Var input);

/// Reads the adjoints of a bound network back into a flat vector with the
/// layout of DenseNet::flatten.
Eigen::VectorXd gradient(const ad::Tape& tape, const BoundNet& net);

/// f(x, grad) returns f(x) and, when grad is non-null, writes the analytic gradient.
using DifferentiableFn = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  Eigen::VectorXd analytic;
  Eigen::VectorXd numeric;
};

/// Central differences per coordinate; relative error uses the denominator
/// max(1e-8, |analytic| + |numeric|).
GradCheckResult grad_check(const DifferentiableFn& f, const Eigen::VectorXd& x, double h);

}  // namespace sdevi
