#include "sdevi/mafbm.hpp"

#include "sdevi/errors.hpp"
#include "sdevi/tape.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace sdevi {

void MafbmConfig::validate() const {
  if (!(hurst > 0.0 && hurst < 1.0)) throw PreconditionError("hurst must lie in (0, 1)");
  if (k_factors < 1) throw PreconditionError("k_factors must be >= 1");
  if (gammas.size() != static_cast<std::size_t>(k_factors)) {
    throw PreconditionError("gammas has " + std::to_string(gammas.size()) + " entries, expected " +
                            std::to_string(k_factors));
  }
  for (std::size_t k = 0; k < gammas.size(); ++k) {
    if (!(gammas[k] > 0.0) || !std::isfinite(gammas[k])) throw PreconditionError("gammas must be positive and finite");
    if (k > 0 && !(gammas[k] > gammas[k - 1])) throw PreconditionError("gammas must be strictly increasing");
  }
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw PreconditionError("horizon must be positive");
}

namespace mafbm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Pairwise integrals (1 - e^{-(g_k + g_l) s}) / (g_k + g_l).
Eigen::MatrixXd pair_kernel(std::span<const double> gammas, double s) {
  const auto k = static_cast<Eigen::Index>(gammas.size());
  Eigen::MatrixXd g(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const double rate = gammas[static_cast<std::size_t>(i)] + gammas[static_cast<std::size_t>(j)];
      g(i, j) = s * ad::phi1_value(rate * s);
    }
  }
  return g;
}

double inf_norm(const Eigen::MatrixXd& a) { return a.cwiseAbs().rowwise().sum().maxCoeff(); }

// Kernel fit: sum_k w_k e^{-g_k u} ~ sqrt(2H) u^{H-1/2}, relative residuals.
Eigen::VectorXd kernel_init(const MafbmConfig& config, const std::vector<double>& grid) {
  const auto k = static_cast<Eigen::Index>(config.gammas.size());
  const auto n = static_cast<Eigen::Index>(grid.size());
  Eigen::MatrixXd design(n, k);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double u = grid[static_cast<std::size_t>(j)];
    const double target = std::sqrt(2.0 * config.hurst) * std::pow(u, config.hurst - 0.5);
    for (Eigen::Index i = 0; i < k; ++i) design(j, i) = std::exp(-config.gammas[static_cast<std::size_t>(i)] * u) / target;
  }
  Eigen::MatrixXd normal = design.transpose() * design;
  const double ridge = 1e-10 * std::max(normal.trace() / static_cast<double>(k), 1e-300);
  normal.diagonal().array() += ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  if (ldlt.info() != Eigen::Success) throw CalibrationError("fit_omega: singular normal equations");
  Eigen::VectorXd w = ldlt.solve(design.transpose() * Eigen::VectorXd::Ones(n));
  if (!w.allFinite()) throw CalibrationError("fit_omega: singular normal equations");
  return w;
}

struct Residuals {
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
};

Residuals relative_residuals(const MafbmConfig& config, const std::vector<double>& grid,
                             const std::vector<Eigen::MatrixXd>& kernels, const Eigen::VectorXd& w) {
  const auto n = static_cast<Eigen::Index>(grid.size());
  Residuals out{Eigen::VectorXd(n), Eigen::MatrixXd(n, w.size())};
  for (Eigen::Index j = 0; j < n; ++j) {
    const double scale = 1.0 / std::pow(grid[static_cast<std::size_t>(j)], 2.0 * config.hurst);
    const Eigen::VectorXd gw = kernels[static_cast<std::size_t>(j)] * w;
    out.r(j) = w.dot(gw) * scale - 1.0;
    out.jac.row(j) = 2.0 * scale * gw.transpose();
  }
  return out;
}

void check_system(const AugmentedSystem& sys) {
  const Eigen::Index d = sys.drift_matrix.rows();
  if (d < 1 || sys.drift_matrix.cols() != d || sys.drift_offset.size() != d || sys.noise_loading.size() != d) {
    throw PreconditionError("augmented system: inconsistent dimensions");
  }
}

// Transition pieces for one step length, reused across a recursion.
struct Step {
  Eigen::MatrixXd f;
  Eigen::VectorXd b;
  Eigen::MatrixXd q;
};

Step make_step(const AugmentedSystem& sys, double tau) {
  return Step{transition_matrix(sys, tau), transition_offset(sys, tau), transition_covariance(sys, tau)};
}

}  // namespace

std::vector<double> gamma_grid(int k_factors, double ratio) {
  if (k_factors < 1) throw PreconditionError("gamma_grid: K must be >= 1");
  if (!(ratio > 1.0) || !std::isfinite(ratio)) throw PreconditionError("gamma_grid: ratio must exceed 1");
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(k_factors));
  const double centre = 0.5 * static_cast<double>(k_factors + 1);
  for (int k = 1; k <= k_factors; ++k) g.push_back(std::pow(ratio, static_cast<double>(k) - centre));
  return g;
}

MafbmConfig default_config(double hurst, int k_factors, double ratio, double horizon) {
  MafbmConfig c;
  c.hurst = hurst;
  c.k_factors = k_factors;
  c.horizon = horizon;
  c.gammas = gamma_grid(k_factors, ratio);
  for (double& g : c.gammas) g *= kRateCentre / horizon;
  c.validate();
  return c;
}

std::vector<double> calibration_times(double horizon) {
  if (!(horizon > 0.0)) throw PreconditionError("calibration_times: horizon must be positive");
  std::vector<double> s(kCalibrationPoints);
  const double lo = std::log(horizon / 1000.0);
  const double hi = std::log(horizon);
  for (int j = 0; j < kCalibrationPoints; ++j) {
    s[static_cast<std::size_t>(j)] = std::exp(lo + (hi - lo) * j / (kCalibrationPoints - 1));
  }
  s.back() = horizon;
  return s;
}

double driver_variance(std::span<const double> gammas, const Eigen::VectorXd& omegas, double s) {
  if (omegas.size() != static_cast<Eigen::Index>(gammas.size())) {
    throw PreconditionError("driver_variance: omegas and gammas differ in length");
  }
  if (!(s >= 0.0)) throw PreconditionError("driver_variance: s must be >= 0");
  return omegas.dot(pair_kernel(gammas, s) * omegas);
}

MafbmWeights fit_omega(const MafbmConfig& config) {
  config.validate();
  const std::vector<double> grid = calibration_times(config.horizon);
  std::vector<Eigen::MatrixXd> kernels;
  kernels.reserve(grid.size());
  for (double s : grid) kernels.push_back(pair_kernel(config.gammas, s));

  Eigen::VectorXd w = kernel_init(config, grid);
  Residuals res = relative_residuals(config, grid, kernels, w);
  double cost = res.r.squaredNorm();
  double mu = 1e-3;
  for (int it = 0; it < 500; ++it) {
    Eigen::MatrixXd normal = res.jac.transpose() * res.jac;
    const Eigen::VectorXd rhs = -res.jac.transpose() * res.r;
    bool improved = false;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::MatrixXd damped = normal;
      damped.diagonal() += mu * normal.diagonal().cwiseMax(1e-12);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
      if (ldlt.info() != Eigen::Success) throw CalibrationError("fit_omega: singular normal equations");
      const Eigen::VectorXd step = ldlt.solve(rhs);
      if (!step.allFinite()) throw CalibrationError("fit_omega: singular normal equations");
      const Eigen::VectorXd trial = w + step;
      Residuals next = relative_residuals(config, grid, kernels, trial);
      const double trial_cost = next.r.squaredNorm();
      if (trial_cost < cost) {
        const double gain = (cost - trial_cost) / std::max(cost, 1e-300);
        w = trial;
        res = std::move(next);
        cost = trial_cost;
        mu = std::max(mu / 3.0, 1e-12);
        improved = true;
        if (gain < 1e-12) it = 500;
        break;
      }
      mu *= 4.0;
    }
    if (!improved) break;
  }
  if (!w.allFinite()) throw CalibrationError("fit_omega: non-finite weights");
  MafbmWeights out;
  out.omegas = w;
  out.max_rel_error = res.r.cwiseAbs().maxCoeff();
  return out;
}

AugmentedSystem build_augmented(const LinearSDEParams& params, const MafbmConfig& config, const MafbmWeights& weights) {
  const auto k = static_cast<Eigen::Index>(config.gammas.size());
  if (weights.omegas.size() != k) throw PreconditionError("build_augmented: omegas and gammas differ in length");
  if (!weights.omegas.allFinite()) throw PreconditionError("build_augmented: omegas must be finite");
  AugmentedSystem sys;
  sys.drift_matrix = Eigen::MatrixXd::Zero(k + 1, k + 1);
  sys.drift_matrix(0, 0) = -params.lambda;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double g = config.gammas[static_cast<std::size_t>(i)];
    sys.drift_matrix(0, i + 1) = -params.varsigma * weights.omegas(i) * g;
    sys.drift_matrix(i + 1, i + 1) = -g;
  }
  sys.drift_offset = Eigen::VectorXd::Zero(k + 1);
  sys.drift_offset(0) = params.eta;
  sys.noise_loading = Eigen::VectorXd::Ones(k + 1);
  sys.noise_loading(0) = params.varsigma * weights.omegas.sum();
  return sys;
}

Eigen::MatrixXd transition_matrix(const AugmentedSystem& sys, double tau) {
  check_system(sys);
  if (!(tau >= 0.0)) throw PreconditionError("transition_matrix: tau must be >= 0");
  const Eigen::MatrixXd& a = sys.drift_matrix;
  const Eigen::Index d = a.rows();
  const double lambda = -a(0, 0);
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(d, d);
  f(0, 0) = std::exp(-lambda * tau);
  for (Eigen::Index k = 1; k < d; ++k) {
    const double g = -a(k, k);
    f(k, k) = std::exp(-g * tau);
    // a_0k * (e^{-g tau} - e^{-lambda tau}) / (lambda - g), written without cancellation.
    f(0, k) = a(0, k) * tau * std::exp(-std::min(lambda, g) * tau) * ad::phi1_value(std::abs(g - lambda) * tau);
  }
  return f;
}

Eigen::VectorXd transition_offset(const AugmentedSystem& sys, double tau) {
  check_system(sys);
  if (!(tau >= 0.0)) throw PreconditionError("transition_offset: tau must be >= 0");
  const double lambda = -sys.drift_matrix(0, 0);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(sys.dim());
  b(0) = sys.drift_offset(0) * tau * ad::phi1_value(lambda * tau);
  return b;
}

Eigen::MatrixXd transition_covariance(const AugmentedSystem& sys, double tau) {
  check_system(sys);
  if (!(tau >= 0.0)) throw PreconditionError("transition_covariance: tau must be >= 0");
  const Eigen::MatrixXd& a = sys.drift_matrix;
  const Eigen::Index d = a.rows();
  if (tau == 0.0) return Eigen::MatrixXd::Zero(d, d);

  // Power series on a short interval, then P(2h) = P(h) + F(h) P(h) F(h)^T.
  const double norm = inf_norm(a);
  int doublings = 0;
  double h = tau;
  while (norm * h > 0.25 && doublings < 200) {
    h *= 0.5;
    ++doublings;
  }
  Eigen::MatrixXd term = sys.noise_loading * sys.noise_loading.transpose();
  Eigen::MatrixXd p = h * term;
  double coef = h;
  for (int n = 2; n <= 60; ++n) {
    term = a * term + term * a.transpose();
    coef *= h / static_cast<double>(n);
    const Eigen::MatrixXd add = coef * term;
    p += add;
    if (add.cwiseAbs().maxCoeff() <= 1e-18 * p.cwiseAbs().maxCoeff()) break;
  }
  for (int i = 0; i < doublings; ++i) {
    const Eigen::MatrixXd f = transition_matrix(sys, h);
    p += f * p * f.transpose();
    h *= 2.0;
  }
  return 0.5 * (p + p.transpose());
}

ConditionalMoments augmented_conditional_moments(const AugmentedSystem& sys, const Eigen::VectorXd& z, double t,
                                                 std::span<const double> targets) {
  check_system(sys);
  if (z.size() != sys.dim()) throw PreconditionError("augmented_conditional_moments: state has wrong dimension");
  if (targets.empty()) throw PreconditionError("conditional moments: empty target set");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!(targets[i] >= t)) throw PreconditionError("conditional moments: target precedes conditioning time");
    if (i > 0 && targets[i] < targets[i - 1]) throw PreconditionError("conditional moments: targets not ascending");
  }
  const auto m = static_cast<Eigen::Index>(targets.size());
  const Eigen::Index obs_idx = sys.observed_index;
  ConditionalMoments out;
  out.mean.resize(m);
  out.cov.resize(m, m);
  out.mean_grad.resize(m, sys.dim());

  // Full state covariance at each target; cross terms propagate forward from the earlier one.
  std::vector<Eigen::MatrixXd> state_cov(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const double h = targets[static_cast<std::size_t>(i)] - t;
    const Eigen::MatrixXd f = transition_matrix(sys, h);
    out.mean(i) = f.row(obs_idx).dot(z) + transition_offset(sys, h)(obs_idx);
    out.mean_grad.row(i) = f.row(obs_idx);
    state_cov[static_cast<std::size_t>(i)] = transition_covariance(sys, h);
    for (Eigen::Index j = 0; j < i; ++j) {
      const double gap = targets[static_cast<std::size_t>(i)] - targets[static_cast<std::size_t>(j)];
      const Eigen::MatrixXd fg = transition_matrix(sys, gap);
      const double c = fg.row(obs_idx).dot(state_cov[static_cast<std::size_t>(j)].col(obs_idx));
      out.cov(i, j) = c;
      out.cov(j, i) = c;
    }
    out.cov(i, i) = state_cov[static_cast<std::size_t>(i)](obs_idx, obs_idx);
  }
  if (!out.mean.allFinite() || !out.cov.allFinite()) throw NumericError("augmented_conditional_moments: non-finite result");
  return out;
}

double augmented_optimal_control(const AugmentedSystem& sys, const Eigen::VectorXd& z, double t,
                                 const ObservationSet& obs) {
  const ObservationSet future = obs.after(t);
  if (future.empty()) return 0.0;
  const ConditionalMoments mom = augmented_conditional_moments(sys, z, t, future.times);
  Eigen::MatrixXd s = mom.cov;
  s.diagonal().array() += obs.noise_var;
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("augmented_optimal_control: covariance is not positive definite");
  const Eigen::VectorXd alpha = llt.solve(future.values_vector() - mom.mean);
  return sys.noise_loading.dot(mom.mean_grad.transpose() * alpha);
}

AugmentedPrior::AugmentedPrior(MafbmConfig config, MafbmWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.omegas.size() != static_cast<Eigen::Index>(config_.gammas.size())) {
    throw PreconditionError("AugmentedPrior: omegas and gammas differ in length");
  }
}

ConditionalMoments AugmentedPrior::moments_from_origin(const LinearSDEParams& params,
                                                       std::span<const double> targets) const {
  const AugmentedSystem sys = build_augmented(params, config_, weights_);
  Eigen::VectorXd z = Eigen::VectorXd::Zero(sys.dim());
  z(0) = params.x0;
  return augmented_conditional_moments(sys, z, 0.0, targets);
}

double AugmentedPrior::log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const {
  const AugmentedSystem sys = build_augmented(params, config_, weights_);
  const Eigen::Index d = sys.dim();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(d);
  m(0) = params.x0;
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(d, d);
  std::map<double, Step> cache;
  double ll = 0.0;
  double t_prev = 0.0;
  const double s0 = obs.noise_var;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double dt = obs.times[i] - t_prev;
    t_prev = obs.times[i];
    auto it = cache.find(dt);
    if (it == cache.end()) it = cache.emplace(dt, make_step(sys, dt)).first;
    const Step& st = it->second;
    m = st.f * m + st.b;
    p = st.f * p * st.f.transpose() + st.q;
    const double s = p(0, 0) + s0;
    const double r = obs.values[i] - m(0);
    ll -= 0.5 * (std::log(s) + kLog2Pi + r * r / s);
    const Eigen::VectorXd gain = p.col(0) / s;
    m += gain * r;
    p -= gain * p.row(0);
    p = 0.5 * (p + p.transpose());
  }
  return ll;
}

}  // namespace mafbm
}  // namespace sdevi
