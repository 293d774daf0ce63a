#include "sdevi/diffnet.hpp"

#include "sdevi/errors.hpp"

#include <cmath>
#include <random>
#include <string>

namespace sdevi {

namespace {

// 53-bit uniform in [0, 1); independent of the standard library's distributions.
double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

Eigen::MatrixXd affine_value(const Eigen::MatrixXd& w, const Eigen::MatrixXd& b, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out = w * x;
  out.colwise() += b.col(0);
  return out;
}

}  // namespace

DenseNet DenseNet::init(std::vector<Eigen::Index> dims, std::uint64_t seed, bool zero_last) {
  if (dims.size() != 4) throw PreconditionError("DenseNet::init: expected 4 layer dims, got " + std::to_string(dims.size()));
  for (Eigen::Index d : dims) {
    if (d < 1) throw PreconditionError("DenseNet::init: layer dims must be positive");
  }
  DenseNet net;
  net.dims_ = std::move(dims);
  std::mt19937_64 gen(seed);
  for (std::size_t l = 0; l + 1 < net.dims_.size(); ++l) {
    const Eigen::Index in = net.dims_[l];
    const Eigen::Index out = net.dims_[l + 1];
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::MatrixXd(out, 1)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < out; ++i) {
      for (Eigen::Index j = 0; j < in; ++j) layer.weight(i, j) = bound * (2.0 * uniform01(gen) - 1.0);
    }
    for (Eigen::Index i = 0; i < out; ++i) layer.bias(i, 0) = bound * (2.0 * uniform01(gen) - 1.0);
    if (zero_last && l + 2 == net.dims_.size()) {
      layer.weight.setZero();
      layer.bias.setZero();
    }
    net.layers_.push_back(std::move(layer));
  }
  return net;
}

DenseNet DenseNet::from_layers(std::vector<DenseLayer> layers) {
  if (layers.size() != 3) throw PreconditionError("DenseNet: expected exactly 3 weight layers");
  DenseNet net;
  net.dims_.push_back(layers.front().weight.cols());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DenseLayer& layer = layers[l];
    if (layer.weight.cols() != net.dims_.back()) throw PreconditionError("DenseNet: inconsistent layer shapes");
    if (layer.bias.rows() != layer.weight.rows() || layer.bias.cols() != 1) {
      throw PreconditionError("DenseNet: bias shape does not match weight");
    }
    net.dims_.push_back(layer.weight.rows());
  }
  net.layers_ = std::move(layers);
  return net;
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const DenseLayer& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Eigen::VectorXd DenseNet::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (const DenseLayer& l : layers_) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) flat(k++) = l.weight(i, j);
    }
    for (Eigen::Index i = 0; i < l.bias.rows(); ++i) flat(k++) = l.bias(i, 0);
  }
  return flat;
}

void DenseNet::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count())) {
    throw PreconditionError("DenseNet::unflatten: size mismatch");
  }
  Eigen::Index k = 0;
  for (DenseLayer& l : layers_) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = flat(k++);
    }
    for (Eigen::Index i = 0; i < l.bias.rows(); ++i) l.bias(i, 0) = flat(k++);
  }
}

Eigen::MatrixXd DenseNet::forward(const Eigen::MatrixXd& input) const {
  if (input.rows() != input_dim()) {
    throw PreconditionError("DenseNet::forward: input has " + std::to_string(input.rows()) + " rows, expected " +
                            std::to_string(input_dim()));
  }
  Eigen::MatrixXd h = affine_value(layers_[0].weight, layers_[0].bias, input);
  h = ad::tanh_values(h);
  h = affine_value(layers_[1].weight, layers_[1].bias, h);
  h = ad::tanh_values(h);
  return affine_value(layers_[2].weight, layers_[2].bias, h);
}

Eigen::VectorXd DenseNet::forward(const Eigen::VectorXd& input) const {
  Eigen::MatrixXd x = input;
  return forward(x).col(0);
}

BoundNet bind(ad::Tape& tape, const DenseNet& net, bool trainable) {
  BoundNet b;
  for (const DenseLayer& l : net.layers()) {
    b.weights.push_back(trainable ? tape.variable(l.weight) : tape.constant(l.weight));
    b.biases.push_back(trainable ? tape.variable(l.bias) : tape.constant(l.bias));
  }
  return b;
}

ad::Var forward(const BoundNet& net, ad::Var input) {
  ad::Var h = ad::tanh(ad::affine(net.weights[0], net.biases[0], input));
  h = ad::tanh(ad::affine(net.weights[1], net.biases[1], h));
  return ad::affine(net.weights[2], net.biases[2], h);
}

Eigen::VectorXd gradient(const ad::Tape& tape, const BoundNet& net) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    n += static_cast<std::size_t>(net.weights[l].value().size() + net.biases[l].value().size());
  }
  Eigen::VectorXd flat(static_cast<Eigen::Index>(n));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const Eigen::MatrixXd gw = tape.grad(net.weights[l]);
    for (Eigen::Index i = 0; i < gw.rows(); ++i) {
      for (Eigen::Index j = 0; j < gw.cols(); ++j) flat(k++) = gw(i, j);
    }
    const Eigen::MatrixXd gb = tape.grad(net.biases[l]);
    for (Eigen::Index i = 0; i < gb.rows(); ++i) flat(k++) = gb(i, 0);
  }
  return flat;
}

GradCheckResult grad_check(const DifferentiableFn& f, const Eigen::VectorXd& x, double h) {
  GradCheckResult r;
  r.analytic = Eigen::VectorXd::Zero(x.size());
  f(x, &r.analytic);
  r.numeric = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp(i) = x(i) + h;
    const double fp = f(xp, nullptr);
    xp(i) = x(i) - h;
    const double fm = f(xp, nullptr);
    xp(i) = x(i);
    r.numeric(i) = (fp - fm) / (2.0 * h);
    const double denom = std::max(1e-8, std::abs(r.analytic(i)) + std::abs(r.numeric(i)));
    const double err = std::abs(r.analytic(i) - r.numeric(i)) / denom;
    if (err > r.max_rel_error || r.worst_index < 0) {
      r.max_rel_error = std::max(r.max_rel_error, err);
      if (err >= r.max_rel_error) r.worst_index = i;
    }
  }
  return r;
}

}  // namespace sdevi
