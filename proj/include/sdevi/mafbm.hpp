#pragma once

// Markov approximation of fractional Brownian motion.
//
// The driver is B^H(t) ~= sum_k omega_k Y_k(t) with dY_k = -gamma_k Y_k dt + dB,
// Y_k(0) = 0, all factors sharing one Brownian motion B. Substituting
// dB^H = sum_k omega_k dY_k into the OU prior gives a (K+1)-dimensional linear
// SDE dZ = (A Z + c) dt + L dB over Z = (X, Y_1, ..., Y_K).

#include "sdevi/lingauss.hpp"

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace sdevi {

struct MafbmConfig {
  double hurst = 0.65;
  int k_factors = 5;
  std::vector<double> gammas;  // strictly increasing, positive
  double horizon = 1.0;        // calibration horizon T

  void validate() const;
};

struct MafbmWeights {
  Eigen::VectorXd omegas;
  /// Max relative error of the driver variance against t^{2H} on the
  /// calibration grid, recorded when the weights were fitted.
  double max_rel_error = 0.0;
};

/// Row 0 of drift_matrix is [-lambda, -varsigma omega_k gamma_k ...], rows
/// 1..K are diag(-gamma_k); drift_offset = (eta, 0, ...);
/// noise_loading = (varsigma sum(omega), 1, ..., 1).
struct AugmentedSystem {
  Eigen::MatrixXd drift_matrix;
  Eigen::VectorXd drift_offset;
  Eigen::VectorXd noise_loading;
  Eigen::Index observed_index = 0;

  Eigen::Index dim() const { return drift_matrix.rows(); }
};

namespace mafbm {

/// Rates per unit horizon at which the default grid is centred. The
/// calibration window [T/1000, T] is matched by rates of about 1/T .. 1000/T.
inline constexpr double kRateCentre = 10.0;
inline constexpr int kCalibrationPoints = 64;

/// gamma_k = r^{k - (K+1)/2}, k = 1..K.
std::vector<double> gamma_grid(int k_factors, double ratio);

/// gamma_grid(K, r) scaled by kRateCentre / horizon.
MafbmConfig default_config(double hurst, int k_factors = 5, double ratio = 10.0, double horizon = 1.0);

/// 64 geometrically spaced times in [T/1000, T].
std::vector<double> calibration_times(double horizon);

/// Var[sum_k omega_k Y_k(s)] with Y_k(0) = 0.
double driver_variance(std::span<const double> gammas, const Eigen::VectorXd& omegas, double s);

/// Calibrates omega so the driver variance matches s^{2H} on the calibration
/// grid (relative least squares). Throws CalibrationError on a singular solve.
MafbmWeights fit_omega(const MafbmConfig& config);

AugmentedSystem build_augmented(const LinearSDEParams& params, const MafbmConfig& config, const MafbmWeights& weights);

/// e^{A tau}, evaluated in closed form from the triangular structure of A.
Eigen::MatrixXd transition_matrix(const AugmentedSystem& sys, double tau);
/// int_0^tau e^{A s} c ds.
Eigen::VectorXd transition_offset(const AugmentedSystem& sys, double tau);
/// int_0^tau e^{A s} L L^T e^{A^T s} ds.
Eigen::MatrixXd transition_covariance(const AugmentedSystem& sys, double tau);

/// Moments of the observed coordinate at `targets` given Z(t) = z.
/// mean_grad is M x (K+1), row i = observed row of e^{A (T_i - t)}.
ConditionalMoments augmented_conditional_moments(const AugmentedSystem& sys, const Eigen::VectorXd& z, double t,
                                                 std::span<const double> targets);

/// L^T grad_z log N(O_future; m_z, C + noise_var I); zero without future data.
double augmented_optimal_control(const AugmentedSystem& sys, const Eigen::VectorXd& z, double t,
                                 const ObservationSet& obs);

/// The augmented linear prior as a family over (lambda, eta, varsigma, x0)
/// with fixed rates and weights; Y_k(0) = 0.
class AugmentedPrior final : public lingauss::LinearPrior {
 public:
  AugmentedPrior(MafbmConfig config, MafbmWeights weights);

  Eigen::Index state_dim() const override { return static_cast<Eigen::Index>(config_.gammas.size()) + 1; }
  ConditionalMoments moments_from_origin(const LinearSDEParams& params,
                                         std::span<const double> targets) const override;
  double log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const override;

  const MafbmConfig& config() const { return config_; }
  const MafbmWeights& weights() const { return weights_; }

 private:
  MafbmConfig config_;
  MafbmWeights weights_;
};

}  // namespace mafbm
}  // namespace sdevi
