#pragma once

// Controlled Euler-Maruyama simulation of the hybrid prior and the Monte
// Carlo evidence lower bound.
//
// BM driver:     dX = [-lambda X + eta + b(X) + g(X) u] dt + g(X) dB
// MA-fBM driver: dY_k = (-gamma_k Y_k + u) dt + dB,
//                dX = [-lambda X + eta + b(X)] dt + g(X) sum_k omega_k dY_k
// with g(X) a floored version of varsigma + s(X), and u = u_lin + u_net.

#include "sdevi/diffnet.hpp"
#include "sdevi/lingauss.hpp"
#include "sdevi/mafbm.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sdevi {

enum class Driver { kBm, kMafbm };
enum class Variant { kLinear, kNonlinear, kHybrid };

std::string to_string(Driver d);
std::string to_string(Variant v);
Driver parse_driver(std::string_view s);
Variant parse_variant(std::string_view s);

inline constexpr Eigen::Index kContextDim = 16;
inline constexpr double kDiffusionFloor = 1e-4;
/// Euler steps never exceed this multiple of 1/gamma_max under the MA-fBM driver.
inline constexpr double kFastFactorStep = 1.5;

struct MafbmDriver {
  MafbmConfig config;
  MafbmWeights weights;
};

struct SdeModel {
  Driver driver = Driver::kBm;
  Variant variant = Variant::kLinear;
  LinearSDEParams linear;
  std::optional<MafbmDriver> mafbm;
  DenseNet drift_net;    // x -> drift residual
  DenseNet diff_net;     // x -> diffusion residual
  DenseNet control_net;  // [state, t, context] -> control residual
  DenseNet encoder;      // [dt_next, O_next] -> context
  bool linear_frozen = true;

  Eigen::Index state_dim() const;
  bool has_nets() const { return variant != Variant::kLinear; }
  bool uses_linear_control() const { return variant != Variant::kNonlinear; }
  AugmentedSystem augmented() const;
  void validate() const;
};

/// LINEAR carries no networks. HYBRID zeroes the output layer of the drift,
/// diffusion and control networks and freezes the linear parameters;
/// NONLINEAR uses standard initialization everywhere and trains them.
SdeModel make_model(Driver driver, Variant variant, const LinearSDEParams& linear, std::optional<MafbmDriver> mafbm,
                    std::uint64_t seed, Eigen::Index hidden = kHiddenWidth);

struct SimConfig {
  double dt_max = 1e-3;
  int n_paths = 32;
  std::uint64_t seed = 0;
  double horizon = 1.0;
  int threads = 0;       // 0: one per hardware thread
  int block_paths = 256;  // paths per tape
};

/// Splits each gap between consecutive anchors (0, sorted anchors, horizon)
/// into ceil(gap / dt_max) equal steps. Anchors land exactly on nodes.
std::vector<double> build_grid(std::span<const double> anchors, double horizon, double dt_max);

/// dt_max, tightened for the fastest MA-fBM factor.
double effective_dt(const SdeModel& model, double dt_max);

struct PathBatch {
  std::vector<double> grid;
  std::vector<Eigen::MatrixXd> states;  // one n_paths x nodes matrix per state coordinate
  Eigen::MatrixXd controls;             // n_paths x steps, left-endpoint control
  Eigen::MatrixXd noise;                // n_paths x steps, Brownian increments
};

struct ModelGradient {
  Eigen::Vector4d linear = Eigen::Vector4d::Zero();  // (lambda, eta, varsigma, x0)
  Eigen::VectorXd drift;
  Eigen::VectorXd diff;
  Eigen::VectorXd control;
  Eigen::VectorXd encoder;
};

struct ElboEstimate {
  double value = 0.0;        // loglik_term - energy_term
  double std_error = 0.0;
  double loglik_term = 0.0;  // mean sum_i log N(O_i; X(t_i), noise_var)
  double energy_term = 0.0;  // mean sum_n u_n^2 dt_n / 2
  int n_paths = 0;
  std::optional<ModelGradient> gradient;  // of value
};

/// Control at one state via the dense closed-form routes plus the residual net.
double control_eval(const SdeModel& model, const Eigen::VectorXd& state, double t, const ObservationSet& obs,
                    double horizon);

PathBatch simulate(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim);

struct MomentSummary {
  std::vector<double> times;
  Eigen::VectorXd mean;  // of the observed coordinate
  Eigen::MatrixXd cov;   // sample covariance across query times
  int n_paths = 0;
};

/// Streams paths without storing them; query times become grid anchors.
MomentSummary simulate_moments(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim,
                               std::span<const double> query_times);

ElboEstimate elbo(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim, bool with_gradient = false);

}  // namespace sdevi
