#pragma once

// Closed-form engine for the linear-Gaussian (Ornstein-Uhlenbeck) prior
//
//   dX = (-lambda X + eta) dt + varsigma dB,
//
// observed through N(O_i; X(t_i), noise_var). Everything here is a pure
// function of its inputs.

#include "sdevi/errors.hpp"

#include <Eigen/Dense>

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sdevi {

struct LinearSDEParams {
  double lambda = 1.0;    // mean-reversion rate, > 0
  double eta = 0.0;       // drift offset
  double varsigma = 1.0;  // diffusion scale, > 0
  double x0 = 0.0;        // state at t = 0

  void validate() const;
  double stationary_mean() const { return eta / lambda; }
};

/// Unconstrained coordinates (log lambda, eta, log varsigma, x0) used by optimizers.
using LinearRaw = Eigen::Vector4d;
LinearRaw to_raw(const LinearSDEParams& p);
LinearSDEParams from_raw(const LinearRaw& raw);

struct ObservationSet {
  std::vector<double> times;   // strictly increasing, >= 0
  std::vector<double> values;  // same length as times
  double noise_var = 0.01;     // per-observation variance, > 0

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }
  /// Throws PreconditionError unless the invariants hold. An empty set is
  /// allowed here; operations that need data check the size themselves.
  void validate() const;
  /// Observations with time strictly greater than t.
  ObservationSet after(double t) const;
  Eigen::VectorXd values_vector() const;
};

/// Joint moments of the observed coordinate at M target times given the
/// state at the conditioning time. `mean_grad` is M x d: row i is the
/// gradient of mean[i] with respect to the d-dimensional conditioning state
/// (d = 1 for the scalar OU prior).
struct ConditionalMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd mean_grad;
};

struct PosteriorMarginal {
  double time = 0.0;
  double mean = 0.0;
  double var = 0.0;
};

namespace lingauss {

/// Moments of X(targets) given X(t) = x. Targets ascending and >= t.
ConditionalMoments ou_conditional_moments(const LinearSDEParams& params, double x, double t,
                                          std::span<const double> targets);

/// log N(obs; mean, cov + noise_var I) via a Cholesky factorization.
double marginal_loglik(const ConditionalMoments& moments, const Eigen::VectorXd& obs_values, double noise_var);

/// varsigma * grad_x log N(O_future; m_x, C + noise_var I), future = times > t.
double optimal_control(const LinearSDEParams& params, double x, double t, const ObservationSet& obs);

/// Exact Gaussian conditional of X(s) given every observation, X(0) = x0.
std::vector<PosteriorMarginal> posterior_marginals(const LinearSDEParams& params, const ObservationSet& obs,
                                                   std::span<const double> query_times);

/// A linear-Gaussian prior family whose parameters are (lambda, eta,
/// varsigma, x0). The evidence of a dataset conditioned on the initial state
/// at t = 0 is available both densely (moments + marginal_loglik) and
/// sequentially (a Kalman recursion in the prior's state space).
class LinearPrior {
 public:
  virtual ~LinearPrior() = default;

  /// Dimension of the Markov state (1 for OU).
  virtual Eigen::Index state_dim() const = 0;

  /// Moments of the observed coordinate at `targets` given the prior starts
  /// at x0 (auxiliary coordinates at 0) at t = 0.
  virtual ConditionalMoments moments_from_origin(const LinearSDEParams& params,
                                                 std::span<const double> targets) const = 0;

  /// Sequential evaluation of log N(O; m, C + noise_var I). O(M) in the data.
  virtual double log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const = 0;

  /// Gradient of log_evidence with respect to the raw coordinates.
  /// Default: central differences of log_evidence.
  virtual LinearRaw log_evidence_gradient(const LinearSDEParams& params, const ObservationSet& obs) const;

  double dense_log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const;
};

/// Scalar OU prior. Its gradient is exact (forward-mode duals through the recursion).
class OuPrior final : public LinearPrior {
 public:
  Eigen::Index state_dim() const override { return 1; }
  ConditionalMoments moments_from_origin(const LinearSDEParams& params,
                                         std::span<const double> targets) const override;
  double log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const override;
  LinearRaw log_evidence_gradient(const LinearSDEParams& params, const ObservationSet& obs) const override;
};

struct FitOptions {
  int steps = 2000;
  double step_size = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct FitResult {
  LinearSDEParams params;
  double loglik = 0.0;
  double initial_loglik = 0.0;
  int steps_run = 0;
};

/// Thrown when the likelihood turns non-finite; carries the last finite iterate.
class FitError : public Error {
 public:
  FitError(const std::string& what, LinearSDEParams last_finite)
      : Error(what), last_finite_(last_finite) {}
  const LinearSDEParams& last_finite() const { return last_finite_; }

 private:
  LinearSDEParams last_finite_;
};

/// Maximizes the evidence by adaptive-moment gradient ascent in raw
/// coordinates. Returns the best iterate, so loglik >= initial_loglik.
FitResult fit_linear(const ObservationSet& obs, const LinearPrior& prior, const LinearSDEParams& init,
                     const FitOptions& options = {});

/// Default starting point: lambda = 1, eta = mean(O), varsigma = sd of the
/// increments scaled by the mean spacing, x0 = first observation.
LinearSDEParams default_fit_init(const ObservationSet& obs);

}  // namespace lingauss
}  // namespace sdevi
