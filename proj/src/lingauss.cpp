#include "sdevi/lingauss.hpp"

#include "sdevi/tape.hpp"

#include <cmath>
#include <string>

namespace sdevi {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw PreconditionError(std::string(what) + " must be finite");
}

// Forward-mode dual number carrying derivatives along the four raw coordinates.
struct Dual {
  double v = 0.0;
  Eigen::Vector4d d = Eigen::Vector4d::Zero();
};

Dual operator+(const Dual& a, const Dual& b) { return {a.v + b.v, a.d + b.d}; }
Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, a.d - b.d}; }
Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, a.d * b.v + b.d * a.v}; }
Dual operator/(const Dual& a, const Dual& b) { return {a.v / b.v, (a.d * b.v - b.d * a.v) / (b.v * b.v)}; }
Dual operator+(const Dual& a, double c) { return {a.v + c, a.d}; }
Dual operator-(double c, const Dual& a) { return {c - a.v, -a.d}; }
Dual operator*(const Dual& a, double c) { return {a.v * c, a.d * c}; }
Dual operator*(double c, const Dual& a) { return a * c; }
Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return {e, a.d * e};
}
Dual log(const Dual& a) { return {std::log(a.v), a.d / a.v}; }
Dual phi1(const Dual& z) { return {ad::phi1_value(z.v), z.d * ad::phi1_derivative(z.v)}; }

double phi1(double z) { return ad::phi1_value(z); }

// Prediction-error decomposition of log N(O; m, C + s0 I) for the OU prior
// started at x0 at t = 0.
template <typename S>
S ou_kalman_loglik(const S& lambda, const S& eta, const S& varsigma, const S& x0, const ObservationSet& obs) {
  using std::exp;
  using std::log;
  S m = x0;
  S p = x0 * 0.0;
  S ll = x0 * 0.0;
  double t_prev = 0.0;
  const double s0 = obs.noise_var;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double dt = obs.times[i] - t_prev;
    t_prev = obs.times[i];
    const S z = lambda * dt;
    const S a = exp(-z);
    m = a * m + eta * dt * phi1(z);
    p = a * a * p + varsigma * varsigma * dt * phi1(2.0 * z);
    const S s = p + s0;
    const S r = obs.values[i] - m;
    ll = ll - 0.5 * (log(s) + kLog2Pi + r * r / s);
    const S k = p / s;
    m = m + k * r;
    p = p * s0 / s;
  }
  return ll;
}

}  // namespace

void LinearSDEParams::validate() const {
  require_finite(lambda, "lambda");
  require_finite(eta, "eta");
  require_finite(varsigma, "varsigma");
  require_finite(x0, "x0");
  if (!(lambda > 0.0)) throw PreconditionError("lambda must be positive");
  if (!(varsigma > 0.0)) throw PreconditionError("varsigma must be positive");
}

LinearRaw to_raw(const LinearSDEParams& p) {
  return LinearRaw(std::log(p.lambda), p.eta, std::log(p.varsigma), p.x0);
}

LinearSDEParams from_raw(const LinearRaw& raw) {
  return LinearSDEParams{std::exp(raw(0)), raw(1), std::exp(raw(2)), raw(3)};
}

void ObservationSet::validate() const {
  if (times.size() != values.size()) {
    throw PreconditionError("observation times and values differ in length (" + std::to_string(times.size()) +
                            " vs " + std::to_string(values.size()) + ")");
  }
  if (!(noise_var > 0.0) || !std::isfinite(noise_var)) throw PreconditionError("noise_var must be positive");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || !std::isfinite(values[i])) {
      throw PreconditionError("observation " + std::to_string(i) + " is not finite");
    }
    if (times[i] < 0.0) throw PreconditionError("observation times must be >= 0");
    if (i > 0 && !(times[i] > times[i - 1])) {
      throw PreconditionError("observation times must be strictly increasing (index " + std::to_string(i) + ")");
    }
  }
}

ObservationSet ObservationSet::after(double t) const {
  ObservationSet out;
  out.noise_var = noise_var;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] > t) {
      out.times.push_back(times[i]);
      out.values.push_back(values[i]);
    }
  }
  return out;
}

Eigen::VectorXd ObservationSet::values_vector() const {
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

namespace lingauss {

namespace {

double ou_mean(const LinearSDEParams& p, double x, double horizon) {
  const double z = p.lambda * horizon;
  return x * std::exp(-z) + p.eta * horizon * phi1(z);
}

// Cov(X(ti), X(tj) | X(t)) in a form that stays finite as lambda -> 0.
double ou_cov(const LinearSDEParams& p, double t, double ti, double tj) {
  const double lo = std::min(ti, tj) - t;
  const double gap = std::abs(ti - tj);
  return p.varsigma * p.varsigma * std::exp(-p.lambda * gap) * lo * phi1(2.0 * p.lambda * lo);
}

void check_targets(double t, std::span<const double> targets) {
  if (targets.empty()) throw PreconditionError("conditional moments: empty target set");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!(targets[i] >= t)) throw PreconditionError("conditional moments: target precedes conditioning time");
    if (i > 0 && targets[i] < targets[i - 1]) throw PreconditionError("conditional moments: targets not ascending");
  }
}

}  // namespace

ConditionalMoments ou_conditional_moments(const LinearSDEParams& params, double x, double t,
                                          std::span<const double> targets) {
  check_targets(t, targets);
  const auto m = static_cast<Eigen::Index>(targets.size());
  ConditionalMoments out;
  out.mean.resize(m);
  out.cov.resize(m, m);
  out.mean_grad.resize(m, 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double h = targets[static_cast<std::size_t>(i)] - t;
    out.mean(i) = ou_mean(params, x, h);
    out.mean_grad(i, 0) = std::exp(-params.lambda * h);
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double c = ou_cov(params, t, targets[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(j)]);
      out.cov(i, j) = c;
      out.cov(j, i) = c;
    }
  }
  return out;
}

double marginal_loglik(const ConditionalMoments& moments, const Eigen::VectorXd& obs_values, double noise_var) {
  const Eigen::Index m = moments.mean.size();
  if (obs_values.size() != m || moments.cov.rows() != m || moments.cov.cols() != m) {
    throw PreconditionError("marginal_loglik: dimension mismatch");
  }
  if (!(noise_var > 0.0)) throw PreconditionError("marginal_loglik: noise_var must be positive");
  if (!moments.cov.allFinite() || !moments.mean.allFinite() || !obs_values.allFinite()) {
    throw NumericError("marginal_loglik: non-finite input");
  }
  Eigen::MatrixXd s = moments.cov;
  s.diagonal().array() += noise_var;
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("marginal_loglik: covariance is not positive definite");
  const Eigen::VectorXd r = obs_values - moments.mean;
  const Eigen::VectorXd w = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double out = -0.5 * (w.squaredNorm() + logdet + static_cast<double>(m) * kLog2Pi);
  if (!std::isfinite(out)) throw NumericError("marginal_loglik: non-finite result");
  return out;
}

double optimal_control(const LinearSDEParams& params, double x, double t, const ObservationSet& obs) {
  const ObservationSet future = obs.after(t);
  if (future.empty()) return 0.0;
  const ConditionalMoments mom = ou_conditional_moments(params, x, t, future.times);
  Eigen::MatrixXd s = mom.cov;
  s.diagonal().array() += obs.noise_var;
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("optimal_control: covariance is not positive definite");
  const Eigen::VectorXd alpha = llt.solve(future.values_vector() - mom.mean);
  return params.varsigma * mom.mean_grad.col(0).dot(alpha);
}

std::vector<PosteriorMarginal> posterior_marginals(const LinearSDEParams& params, const ObservationSet& obs,
                                                   std::span<const double> query_times) {
  params.validate();
  obs.validate();
  const auto m = static_cast<Eigen::Index>(obs.size());
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::VectorXd alpha;
  if (m > 0) {
    Eigen::MatrixXd s(m, m);
    Eigen::VectorXd resid(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      resid(i) = obs.values[static_cast<std::size_t>(i)] - ou_mean(params, params.x0, obs.times[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = 0; j < m; ++j) {
        s(i, j) = ou_cov(params, 0.0, obs.times[static_cast<std::size_t>(i)], obs.times[static_cast<std::size_t>(j)]);
      }
      s(i, i) += obs.noise_var;
    }
    llt.compute(s);
    if (llt.info() != Eigen::Success) throw NumericError("posterior_marginals: covariance is not positive definite");
    alpha = llt.solve(resid);
  }
  std::vector<PosteriorMarginal> out;
  out.reserve(query_times.size());
  for (double s_time : query_times) {
    if (!(s_time >= 0.0)) throw PreconditionError("posterior_marginals: query time must be >= 0");
    PosteriorMarginal pm;
    pm.time = s_time;
    pm.mean = ou_mean(params, params.x0, s_time);
    pm.var = ou_cov(params, 0.0, s_time, s_time);
    if (m > 0) {
      Eigen::VectorXd k(m);
      for (Eigen::Index i = 0; i < m; ++i) k(i) = ou_cov(params, 0.0, s_time, obs.times[static_cast<std::size_t>(i)]);
      pm.mean += k.dot(alpha);
      pm.var -= k.dot(llt.solve(k));
      pm.var = std::max(pm.var, 0.0);
    }
    out.push_back(pm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear priors

LinearRaw LinearPrior::log_evidence_gradient(const LinearSDEParams& params, const ObservationSet& obs) const {
  const LinearRaw raw = to_raw(params);
  LinearRaw g;
  for (int i = 0; i < 4; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(raw(i)));
    LinearRaw up = raw;
    LinearRaw dn = raw;
    up(i) += h;
    dn(i) -= h;
    g(i) = (log_evidence(from_raw(up), obs) - log_evidence(from_raw(dn), obs)) / (2.0 * h);
  }
  return g;
}

double LinearPrior::dense_log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const {
  return marginal_loglik(moments_from_origin(params, obs.times), obs.values_vector(), obs.noise_var);
}

ConditionalMoments OuPrior::moments_from_origin(const LinearSDEParams& params, std::span<const double> targets) const {
  return ou_conditional_moments(params, params.x0, 0.0, targets);
}

double OuPrior::log_evidence(const LinearSDEParams& params, const ObservationSet& obs) const {
  return ou_kalman_loglik(params.lambda, params.eta, params.varsigma, params.x0, obs);
}

LinearRaw OuPrior::log_evidence_gradient(const LinearSDEParams& params, const ObservationSet& obs) const {
  const LinearRaw raw = to_raw(params);
  auto seed = [](double v, int k) {
    Dual d;
    d.v = v;
    d.d(k) = 1.0;
    return d;
  };
  const Dual log_lambda = seed(raw(0), 0);
  const Dual eta = seed(raw(1), 1);
  const Dual log_varsigma = seed(raw(2), 2);
  const Dual x0 = seed(raw(3), 3);
  const Dual ll = ou_kalman_loglik(exp(log_lambda), eta, exp(log_varsigma), x0, obs);
  return ll.d;
}

LinearSDEParams default_fit_init(const ObservationSet& obs) {
  if (obs.size() < 2) throw PreconditionError("default_fit_init: need at least two observations");
  const Eigen::VectorXd v = obs.values_vector();
  const double mean = v.mean();
  double qv = 0.0;
  for (std::size_t i = 1; i < obs.size(); ++i) {
    const double d = obs.values[i] - obs.values[i - 1];
    qv += d * d;
  }
  const double span = obs.times.back() - obs.times.front();
  const double varsigma = std::max(std::sqrt(qv / std::max(span, 1e-12)), 1e-3);
  return LinearSDEParams{1.0, mean, varsigma, obs.values.front()};
}

FitResult fit_linear(const ObservationSet& obs, const LinearPrior& prior, const LinearSDEParams& init,
                     const FitOptions& options) {
  obs.validate();
  init.validate();
  if (obs.size() < 2) throw PreconditionError("fit_linear: need at least two observations");
  if (options.steps < 0 || !(options.step_size > 0.0)) throw PreconditionError("fit_linear: invalid options");

  LinearRaw raw = to_raw(init);
  FitResult result;
  result.params = init;
  result.initial_loglik = prior.log_evidence(init, obs);
  if (!std::isfinite(result.initial_loglik)) throw FitError("fit_linear: initial likelihood is not finite", init);
  result.loglik = result.initial_loglik;

  LinearRaw m1 = LinearRaw::Zero();
  LinearRaw m2 = LinearRaw::Zero();
  LinearSDEParams last_finite = init;
  for (int step = 1; step <= options.steps; ++step) {
    const LinearRaw g = prior.log_evidence_gradient(from_raw(raw), obs);
    if (!g.allFinite()) throw FitError("fit_linear: non-finite gradient at step " + std::to_string(step), last_finite);
    m1 = options.beta1 * m1 + (1.0 - options.beta1) * g;
    m2 = options.beta2 * m2 + (1.0 - options.beta2) * g.cwiseAbs2();
    const LinearRaw mhat = m1 / (1.0 - std::pow(options.beta1, step));
    const LinearRaw vhat = m2 / (1.0 - std::pow(options.beta2, step));
    raw += options.step_size * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + options.epsilon).matrix());
    const LinearSDEParams candidate = from_raw(raw);
    const double ll = prior.log_evidence(candidate, obs);
    if (!std::isfinite(ll) || !raw.allFinite()) {
      throw FitError("fit_linear: likelihood became non-finite at step " + std::to_string(step), last_finite);
    }
    last_finite = candidate;
    result.steps_run = step;
    if (ll > result.loglik) {
      result.loglik = ll;
      result.params = candidate;
    }
  }
  return result;
}

}  // namespace lingauss
}  // namespace sdevi
