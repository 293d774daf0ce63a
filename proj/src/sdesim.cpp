#include "sdevi/sdesim.hpp"

#include "sdevi/errors.hpp"
#include "sdevi/parallel.hpp"
#include "sdevi/random.hpp"
#include "sdevi/tape.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

namespace sdevi {

namespace {

using ad::Matrix;
using ad::Tape;
using ad::Var;

constexpr double kLog2Pi = 1.8378770664093453;

double phi1(double z) { return ad::phi1_value(z); }

// Everything about a run that does not depend on the paths.
struct Plan {
  std::vector<double> grid;
  std::vector<int> obs_at;  // per node: observation index or -1
  Matrix encoder_input;     // 2 x steps
  bool schedule_fixed = true;
  std::vector<double> alpha;  // per step: u_lin = alpha + beta . z
  Matrix beta;                // steps x state_dim
  Matrix weighted_rates;      // 1 x K, omega_k gamma_k
  Eigen::VectorXd neg_gamma;  // -gamma_k
  double omega_sum = 0.0;
  double horizon = 1.0;

  int steps() const { return static_cast<int>(grid.size()) - 1; }
};

// Backward recursion for the OU prior: log p(future obs | x) = -P x^2 / 2 + h x + const,
// so u_lin = varsigma (h - P x). Works on doubles and on tape nodes.
template <typename S>
void bm_schedule(const S& lambda, const S& eta, const S& varsigma, const S& zero, const Plan& plan,
                 const ObservationSet& obs, std::vector<S>& alpha, std::vector<S>& beta) {
  using std::exp;
  const int steps = plan.steps();
  alpha.assign(static_cast<std::size_t>(steps), zero);
  beta.assign(static_cast<std::size_t>(steps), zero);
  S p = zero;
  S h = zero;
  const double s0 = obs.noise_var;
  for (int n = steps - 1; n >= 0; --n) {
    const int i = plan.obs_at[static_cast<std::size_t>(n + 1)];
    if (i >= 0) {
      p = p + 1.0 / s0;
      h = h + obs.values[static_cast<std::size_t>(i)] / s0;
    }
    const double dt = plan.grid[static_cast<std::size_t>(n + 1)] - plan.grid[static_cast<std::size_t>(n)];
    const S z = lambda * dt;
    const S f = exp(-z);
    const S b = eta * dt * phi1(z);
    const S q = varsigma * varsigma * dt * phi1(z * 2.0);
    const S den = p * q + 1.0;
    const S p_next = f * f * p / den;
    h = f * (h - p * b) / den;
    p = p_next;
    alpha[static_cast<std::size_t>(n)] = varsigma * h;
    beta[static_cast<std::size_t>(n)] = -(varsigma * p);
  }
}

// Information-form recursion in the augmented space: u_lin = L^T (h - P z).
void mafbm_schedule(const AugmentedSystem& sys, const Plan& plan, const ObservationSet& obs,
                    std::vector<double>& alpha, Matrix& beta) {
  const int steps = plan.steps();
  const Eigen::Index d = sys.dim();
  alpha.assign(static_cast<std::size_t>(steps), 0.0);
  beta = Matrix::Zero(steps, d);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(d);
  std::map<double, std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> cache;
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  for (int n = steps - 1; n >= 0; --n) {
    const int i = plan.obs_at[static_cast<std::size_t>(n + 1)];
    if (i >= 0) {
      p(0, 0) += 1.0 / obs.noise_var;
      h(0) += obs.values[static_cast<std::size_t>(i)] / obs.noise_var;
    }
    const double dt = plan.grid[static_cast<std::size_t>(n + 1)] - plan.grid[static_cast<std::size_t>(n)];
    auto it = cache.find(dt);
    if (it == cache.end()) {
      it = cache.emplace(dt, std::make_pair(mafbm::transition_matrix(sys, dt), mafbm::transition_covariance(sys, dt)))
               .first;
    }
    const Eigen::MatrixXd& f = it->second.first;
    const Eigen::MatrixXd& q = it->second.second;
    const Eigen::VectorXd b = mafbm::transition_offset(sys, dt);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(eye + p * q);
    const Eigen::MatrixXd pt = lu.solve(p);
    const Eigen::VectorXd ht = lu.solve(h - p * b);
    p = f.transpose() * pt * f;
    p = 0.5 * (p + p.transpose());
    h = f.transpose() * ht;
    alpha[static_cast<std::size_t>(n)] = sys.noise_loading.dot(h);
    beta.row(n) = -(p * sys.noise_loading).transpose();
  }
}

Plan make_plan(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim,
               std::span<const double> extra_anchors) {
  model.validate();
  obs.validate();
  if (!(sim.dt_max > 0.0)) throw PreconditionError("dt_max must be positive");
  if (sim.n_paths < 1) throw PreconditionError("n_paths must be >= 1");
  if (sim.block_paths < 1) throw PreconditionError("block_paths must be >= 1");
  if (!obs.empty() && obs.times.back() > sim.horizon) {
    throw PreconditionError("observation times must lie within [0, horizon]");
  }
  Plan plan;
  plan.horizon = sim.horizon;
  std::vector<double> anchors(obs.times.begin(), obs.times.end());
  anchors.insert(anchors.end(), extra_anchors.begin(), extra_anchors.end());
  plan.grid = build_grid(anchors, sim.horizon, effective_dt(model, sim.dt_max));
  const int steps = plan.steps();

  plan.obs_at.assign(plan.grid.size(), -1);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto pos = std::lower_bound(plan.grid.begin(), plan.grid.end(), obs.times[i]);
    plan.obs_at[static_cast<std::size_t>(pos - plan.grid.begin())] = static_cast<int>(i);
  }

  plan.encoder_input.resize(2, steps);
  int next = 0;
  for (int n = 0; n < steps; ++n) {
    const double t = plan.grid[static_cast<std::size_t>(n)];
    while (next < static_cast<int>(obs.size()) && !(obs.times[static_cast<std::size_t>(next)] > t)) ++next;
    if (next < static_cast<int>(obs.size())) {
      plan.encoder_input(0, n) = obs.times[static_cast<std::size_t>(next)] - t;
      plan.encoder_input(1, n) = obs.values[static_cast<std::size_t>(next)];
    } else {
      plan.encoder_input(0, n) = sim.horizon - t;
      plan.encoder_input(1, n) = 0.0;
    }
  }

  if (model.driver == Driver::kMafbm) {
    const MafbmDriver& md = *model.mafbm;
    const auto k = static_cast<Eigen::Index>(md.config.gammas.size());
    plan.weighted_rates.resize(1, k);
    plan.neg_gamma.resize(k);
    for (Eigen::Index j = 0; j < k; ++j) {
      const double g = md.config.gammas[static_cast<std::size_t>(j)];
      plan.weighted_rates(0, j) = md.weights.omegas(j) * g;
      plan.neg_gamma(j) = -g;
    }
    plan.omega_sum = md.weights.omegas.sum();
  }

  if (model.uses_linear_control()) {
    if (model.driver == Driver::kMafbm) {
      mafbm_schedule(model.augmented(), plan, obs, plan.alpha, plan.beta);
    } else if (model.linear_frozen) {
      std::vector<double> beta;
      bm_schedule(model.linear.lambda, model.linear.eta, model.linear.varsigma, 0.0, plan, obs, plan.alpha, beta);
      plan.beta = Eigen::Map<const Matrix>(beta.data(), steps, 1);
    } else {
      plan.schedule_fixed = false;
    }
  }
  return plan;
}

struct Observer {
  std::function<void(int node, const Matrix& x, const Matrix* y)> on_node;
  std::function<void(int step, const Matrix& u, const Matrix& dw)> on_step;
};

struct BlockOut {
  Eigen::VectorXd ll;
  Eigen::VectorXd en;
  ModelGradient grad;
};

[[noreturn]] void report_nonfinite(const Matrix& v, int first, int step) {
  Eigen::Index bad = 0;
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    if (!v.col(j).allFinite()) {
      bad = j;
      break;
    }
  }
  throw SimulationError("non-finite state on path " + std::to_string(first + bad) + " at step " +
                        std::to_string(step));
}

BlockOut run_block(const SdeModel& m, const ObservationSet& obs, const Plan& plan, const SimConfig& sim, int first,
                   int count, int total_paths, bool with_grad, const Observer* observer) {
  Tape tape(with_grad);
  const Eigen::Index b = count;
  const bool train_linear = with_grad && !m.linear_frozen;
  const bool mafbm = m.driver == Driver::kMafbm;
  auto leaf = [&](double v) { return train_linear ? tape.variable(v) : tape.constant(v); };
  const Var lambda = leaf(m.linear.lambda);
  const Var eta = leaf(m.linear.eta);
  const Var varsigma = leaf(m.linear.varsigma);
  const Var x0 = leaf(m.linear.x0);
  const Var lambda_b = ad::broadcast_cols(lambda, b);
  const Var eta_b = ad::broadcast_cols(eta, b);
  const Var varsigma_b = ad::broadcast_cols(varsigma, b);

  BoundNet drift_net, diff_net, control_net, encoder;
  Var context;
  Var tau_b;
  if (m.has_nets()) {
    drift_net = bind(tape, m.drift_net, with_grad);
    diff_net = bind(tape, m.diff_net, with_grad);
    control_net = bind(tape, m.control_net, with_grad);
    encoder = bind(tape, m.encoder, with_grad);
    context = forward(encoder, tape.constant(plan.encoder_input));
    const double knee_min = 1.01 * kDiffusionFloor;
    tau_b = (0.5 * m.linear.varsigma >= knee_min) ? ad::broadcast_cols(0.5 * varsigma, b)
                                                   : tape.constant(Matrix::Constant(1, b, knee_min));
  }

  std::vector<Var> alpha_v, beta_v;
  if (m.uses_linear_control() && !plan.schedule_fixed) {
    bm_schedule(lambda, eta, varsigma, tape.constant(0.0), plan, obs, alpha_v, beta_v);
  }

  const Eigen::Index k = mafbm ? plan.neg_gamma.size() : 0;
  Var x = ad::broadcast_cols(x0, b);
  Var y = mafbm ? tape.constant(Matrix::Zero(k, b)) : Var();
  Var ll = tape.constant(Matrix::Zero(1, b));
  Var en = tape.constant(Matrix::Zero(1, b));
  const double s0 = obs.noise_var;
  const double ll_const = -0.5 * (kLog2Pi + std::log(s0));
  auto add_obs = [&](int node) {
    const int i = plan.obs_at[static_cast<std::size_t>(node)];
    if (i < 0) return;
    const Var r = obs.values[static_cast<std::size_t>(i)] - x;
    ll = ll + (ad::square(r) * (-0.5 / s0) + ll_const);
  };
  add_obs(0);
  if (observer) observer->on_node(0, x.value(), mafbm ? &y.value() : nullptr);
  const std::size_t base = tape.size();

  Matrix dw(1, b);
  for (int n = 0; n < plan.steps(); ++n) {
    const double t = plan.grid[static_cast<std::size_t>(n)];
    const double dt = plan.grid[static_cast<std::size_t>(n + 1)] - t;
    const double sqrt_dt = std::sqrt(dt);
    for (Eigen::Index j = 0; j < b; ++j) {
      dw(0, j) = sqrt_dt * rng::normal(sim.seed, static_cast<std::uint64_t>(first + j), static_cast<std::uint64_t>(n));
    }
    const Var dw_v = tape.constant(dw);

    Var u_lin;
    if (m.uses_linear_control()) {
      if (plan.schedule_fixed) {
        u_lin = x * plan.beta(n, 0) + plan.alpha[static_cast<std::size_t>(n)];
        if (mafbm) u_lin = u_lin + ad::matmul_const(plan.beta.block(n, 1, 1, k), y);
      } else {
        u_lin = x * ad::broadcast_cols(beta_v[static_cast<std::size_t>(n)], b) +
                ad::broadcast_cols(alpha_v[static_cast<std::size_t>(n)], b);
      }
    }
    Var u = u_lin;
    Var drift = eta_b - lambda_b * x;
    Var g = varsigma_b;
    if (m.has_nets()) {
      const Var t_row = tape.constant(Matrix::Constant(1, b, t));
      const Var ctx = ad::broadcast_cols(ad::col(context, n), b);
      const Var input = mafbm ? ad::concat_rows({x, y, t_row, ctx}) : ad::concat_rows({x, t_row, ctx});
      const Var u_net = forward(control_net, input);
      u = m.uses_linear_control() ? u_lin + u_net : u_net;
      drift = drift + forward(drift_net, x);
      g = ad::soft_floor(varsigma_b + forward(diff_net, x), tau_b, kDiffusionFloor);
    }
    en = en + ad::square(u) * (0.5 * dt);
    if (mafbm) {
      const Var weighted = ad::matmul_const(plan.weighted_rates, y);
      const Var v = u * dt + dw_v;
      const Var y_next = y + ad::mul_rows_const(y, plan.neg_gamma * dt) + ad::broadcast_rows(v, k);
      const Var dbh = v * plan.omega_sum - weighted * dt;
      x = x + drift * dt + g * dbh;
      y = y_next;
      if (!y.value().allFinite()) report_nonfinite(y.value(), first, n);
    } else {
      x = x + (drift + g * u) * dt + g * dw_v;
    }
    if (!x.value().allFinite()) report_nonfinite(x.value(), first, n);
    if (observer) {
      observer->on_step(n, u.value(), dw);
      observer->on_node(n + 1, x.value(), mafbm ? &y.value() : nullptr);
    }
    add_obs(n + 1);
    if (!with_grad) {
      // Nothing is differentiated, so only the running state has to survive.
      Matrix xv = x.value();
      Matrix yv = mafbm ? y.value() : Matrix();
      Matrix llv = ll.value();
      Matrix env = en.value();
      tape.truncate(base);
      x = tape.constant(std::move(xv));
      if (mafbm) y = tape.constant(std::move(yv));
      ll = tape.constant(std::move(llv));
      en = tape.constant(std::move(env));
    }
  }

  BlockOut out;
  out.ll = ll.value().row(0).transpose();
  out.en = en.value().row(0).transpose();
  if (with_grad) {
    const Var total = ad::sum(ll - en) * (1.0 / static_cast<double>(total_paths));
    tape.backward(total);
    if (train_linear) {
      out.grad.linear << tape.grad(lambda)(0, 0), tape.grad(eta)(0, 0), tape.grad(varsigma)(0, 0), tape.grad(x0)(0, 0);
    }
    if (m.has_nets()) {
      out.grad.drift = gradient(tape, drift_net);
      out.grad.diff = gradient(tape, diff_net);
      out.grad.control = gradient(tape, control_net);
      out.grad.encoder = gradient(tape, encoder);
    }
  }
  return out;
}

int block_count(const SimConfig& sim) { return (sim.n_paths + sim.block_paths - 1) / sim.block_paths; }

void add_into(Eigen::VectorXd& acc, const Eigen::VectorXd& v) {
  if (v.size() == 0) return;
  if (acc.size() == 0) {
    acc = v;
  } else {
    acc += v;
  }
}

}  // namespace

std::string to_string(Driver d) { return d == Driver::kBm ? "bm" : "mafbm"; }

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kLinear:
      return "linear";
    case Variant::kNonlinear:
      return "nonlinear";
    case Variant::kHybrid:
      return "hybrid";
  }
  return "?";
}

Driver parse_driver(std::string_view s) {
  if (s == "bm") return Driver::kBm;
  if (s == "mafbm") return Driver::kMafbm;
  throw PreconditionError("unknown driver '" + std::string(s) + "' (expected bm or mafbm)");
}

Variant parse_variant(std::string_view s) {
  if (s == "linear") return Variant::kLinear;
  if (s == "nonlinear") return Variant::kNonlinear;
  if (s == "hybrid") return Variant::kHybrid;
  throw PreconditionError("unknown variant '" + std::string(s) + "' (expected linear, nonlinear or hybrid)");
}

Eigen::Index SdeModel::state_dim() const {
  if (driver == Driver::kMafbm && mafbm) return static_cast<Eigen::Index>(mafbm->config.gammas.size()) + 1;
  return 1;
}

AugmentedSystem SdeModel::augmented() const {
  if (driver != Driver::kMafbm || !mafbm) throw ContractError("augmented(): model does not use the MA-fBM driver");
  return mafbm::build_augmented(linear, mafbm->config, mafbm->weights);
}

void SdeModel::validate() const {
  linear.validate();
  if (driver == Driver::kMafbm) {
    if (!mafbm) throw PreconditionError("MA-fBM driver requires calibrated weights");
    mafbm->config.validate();
    if (mafbm->weights.omegas.size() != static_cast<Eigen::Index>(mafbm->config.gammas.size())) {
      throw PreconditionError("MA-fBM weights and rates differ in length");
    }
    if (!linear_frozen && uses_linear_control()) {
      throw ContractError("the MA-fBM linear control is not differentiated; freeze the linear parameters");
    }
  }
  if (has_nets()) {
    const Eigen::Index d = state_dim();
    if (drift_net.empty() || diff_net.empty() || control_net.empty() || encoder.empty()) {
      throw PreconditionError("variant " + to_string(variant) + " requires all four networks");
    }
    if (drift_net.input_dim() != 1 || drift_net.output_dim() != 1 || diff_net.input_dim() != 1 ||
        diff_net.output_dim() != 1) {
      throw PreconditionError("drift and diffusion networks must map 1 -> 1");
    }
    if (encoder.input_dim() != 2 || encoder.output_dim() != kContextDim) {
      throw PreconditionError("encoder must map 2 -> " + std::to_string(kContextDim));
    }
    if (control_net.input_dim() != d + 1 + kContextDim || control_net.output_dim() != 1) {
      throw PreconditionError("control network input must be state, time and context");
    }
  }
}

SdeModel make_model(Driver driver, Variant variant, const LinearSDEParams& linear, std::optional<MafbmDriver> mafbm,
                    std::uint64_t seed, Eigen::Index hidden) {
  SdeModel m;
  m.driver = driver;
  m.variant = variant;
  m.linear = linear;
  m.mafbm = std::move(mafbm);
  m.linear_frozen = variant != Variant::kNonlinear;
  if (m.has_nets()) {
    const bool zero = variant == Variant::kHybrid;
    const Eigen::Index d = m.state_dim();
    m.drift_net = DenseNet::init({1, hidden, hidden, 1}, rng::derive_seed(seed, 1), zero);
    m.diff_net = DenseNet::init({1, hidden, hidden, 1}, rng::derive_seed(seed, 2), zero);
    m.control_net = DenseNet::init({d + 1 + kContextDim, hidden, hidden, 1}, rng::derive_seed(seed, 3), zero);
    m.encoder = DenseNet::init({2, hidden, hidden, kContextDim}, rng::derive_seed(seed, 4), false);
  }
  m.validate();
  return m;
}

std::vector<double> build_grid(std::span<const double> anchors, double horizon, double dt_max) {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw PreconditionError("build_grid: horizon must be positive");
  if (!(dt_max > 0.0)) throw PreconditionError("build_grid: dt_max must be positive");
  std::vector<double> points{0.0};
  std::vector<double> sorted(anchors.begin(), anchors.end());
  std::sort(sorted.begin(), sorted.end());
  for (double a : sorted) {
    if (!(a >= 0.0) || a > horizon) throw PreconditionError("build_grid: anchor outside [0, horizon]");
    if (a > points.back()) points.push_back(a);
  }
  if (horizon > points.back()) points.push_back(horizon);
  std::vector<double> grid{0.0};
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double lo = points[i - 1];
    const double gap = points[i] - lo;
    const int n = std::max(1, static_cast<int>(std::ceil(gap / dt_max * (1.0 - 1e-12))));
    for (int j = 1; j < n; ++j) grid.push_back(lo + gap * static_cast<double>(j) / static_cast<double>(n));
    grid.push_back(points[i]);
  }
  return grid;
}

double effective_dt(const SdeModel& model, double dt_max) {
  if (model.driver == Driver::kMafbm && model.mafbm && !model.mafbm->config.gammas.empty()) {
    return std::min(dt_max, kFastFactorStep / model.mafbm->config.gammas.back());
  }
  return dt_max;
}

double control_eval(const SdeModel& model, const Eigen::VectorXd& state, double t, const ObservationSet& obs,
                    double horizon) {
  if (state.size() != model.state_dim()) throw PreconditionError("control_eval: state has wrong dimension");
  double u = 0.0;
  if (model.uses_linear_control()) {
    u = model.driver == Driver::kMafbm ? mafbm::augmented_optimal_control(model.augmented(), state, t, obs)
                                       : lingauss::optimal_control(model.linear, state(0), t, obs);
  }
  if (model.has_nets()) {
    Eigen::VectorXd enc_in(2);
    enc_in << horizon - t, 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (obs.times[i] > t) {
        enc_in << obs.times[i] - t, obs.values[i];
        break;
      }
    }
    const Eigen::VectorXd ctx = model.encoder.forward(enc_in);
    Eigen::VectorXd input(state.size() + 1 + ctx.size());
    input << state, t, ctx;
    u += model.control_net.forward(input)(0);
  }
  return u;
}

PathBatch simulate(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim) {
  const Plan plan = make_plan(model, obs, sim, {});
  const Eigen::Index nodes = static_cast<Eigen::Index>(plan.grid.size());
  const Eigen::Index d = model.state_dim();
  PathBatch batch;
  batch.grid = plan.grid;
  batch.states.assign(static_cast<std::size_t>(d), Matrix(sim.n_paths, nodes));
  batch.controls.resize(sim.n_paths, plan.steps());
  batch.noise.resize(sim.n_paths, plan.steps());
  const int blocks = block_count(sim);
  parallel_for(blocks, sim.threads, [&](int bi) {
    const int first = bi * sim.block_paths;
    const int count = std::min(sim.block_paths, sim.n_paths - first);
    Observer obs_cb;
    obs_cb.on_node = [&](int node, const Matrix& x, const Matrix* y) {
      batch.states[0].block(first, node, count, 1) = x.transpose();
      if (y) {
        for (Eigen::Index c = 0; c < y->rows(); ++c) {
          batch.states[static_cast<std::size_t>(c + 1)].block(first, node, count, 1) = y->row(c).transpose();
        }
      }
    };
    obs_cb.on_step = [&](int step, const Matrix& u, const Matrix& dw) {
      batch.controls.block(first, step, count, 1) = u.transpose();
      batch.noise.block(first, step, count, 1) = dw.transpose();
    };
    run_block(model, obs, plan, sim, first, count, sim.n_paths, false, &obs_cb);
  });
  return batch;
}

MomentSummary simulate_moments(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim,
                               std::span<const double> query_times) {
  if (query_times.empty()) throw PreconditionError("simulate_moments: no query times");
  const Plan plan = make_plan(model, obs, sim, query_times);
  const auto q = static_cast<Eigen::Index>(query_times.size());
  std::vector<int> node_slot(plan.grid.size(), -1);
  for (Eigen::Index i = 0; i < q; ++i) {
    const auto pos = std::lower_bound(plan.grid.begin(), plan.grid.end(), query_times[static_cast<std::size_t>(i)]);
    node_slot[static_cast<std::size_t>(pos - plan.grid.begin())] = static_cast<int>(i);
  }
  struct Partial {
    Eigen::VectorXd mean;
    Eigen::MatrixXd m2;
    int n = 0;
  };
  const int blocks = block_count(sim);
  std::vector<Partial> parts(static_cast<std::size_t>(blocks));
  parallel_for(blocks, sim.threads, [&](int bi) {
    const int first = bi * sim.block_paths;
    const int count = std::min(sim.block_paths, sim.n_paths - first);
    Matrix samples(q, count);
    Observer cb;
    cb.on_node = [&](int node, const Matrix& x, const Matrix*) {
      const int slot = node_slot[static_cast<std::size_t>(node)];
      if (slot >= 0) samples.row(slot) = x.row(0);
    };
    cb.on_step = [](int, const Matrix&, const Matrix&) {};
    run_block(model, obs, plan, sim, first, count, sim.n_paths, false, &cb);
    Partial& p = parts[static_cast<std::size_t>(bi)];
    p.n = count;
    p.mean = samples.rowwise().mean();
    const Matrix centred = samples.colwise() - p.mean;
    p.m2 = centred * centred.transpose();
  });
  // Pairwise merge in block order.
  Eigen::VectorXd mean = parts[0].mean;
  Eigen::MatrixXd m2 = parts[0].m2;
  double n = parts[0].n;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const double nb = parts[i].n;
    const Eigen::VectorXd delta = parts[i].mean - mean;
    const double tot = n + nb;
    mean += delta * (nb / tot);
    m2 += parts[i].m2 + delta * delta.transpose() * (n * nb / tot);
    n = tot;
  }
  MomentSummary out;
  out.times.assign(query_times.begin(), query_times.end());
  out.mean = mean;
  out.cov = n > 1 ? Eigen::MatrixXd(m2 / (n - 1.0)) : Eigen::MatrixXd::Zero(q, q);
  out.n_paths = sim.n_paths;
  return out;
}

ElboEstimate elbo(const SdeModel& model, const ObservationSet& obs, const SimConfig& sim, bool with_gradient) {
  const Plan plan = make_plan(model, obs, sim, {});
  const int blocks = block_count(sim);
  std::vector<BlockOut> outs(static_cast<std::size_t>(blocks));
  parallel_for(blocks, sim.threads, [&](int bi) {
    const int first = bi * sim.block_paths;
    const int count = std::min(sim.block_paths, sim.n_paths - first);
    outs[static_cast<std::size_t>(bi)] =
        run_block(model, obs, plan, sim, first, count, sim.n_paths, with_gradient, nullptr);
  });

  Eigen::VectorXd ll(sim.n_paths);
  Eigen::VectorXd en(sim.n_paths);
  ModelGradient grad;
  for (int bi = 0; bi < blocks; ++bi) {
    const BlockOut& o = outs[static_cast<std::size_t>(bi)];
    ll.segment(bi * sim.block_paths, o.ll.size()) = o.ll;
    en.segment(bi * sim.block_paths, o.en.size()) = o.en;
    if (with_gradient) {
      grad.linear += o.grad.linear;
      add_into(grad.drift, o.grad.drift);
      add_into(grad.diff, o.grad.diff);
      add_into(grad.control, o.grad.control);
      add_into(grad.encoder, o.grad.encoder);
    }
  }
  ElboEstimate est;
  est.n_paths = sim.n_paths;
  est.loglik_term = ll.mean();
  est.energy_term = en.mean();
  est.value = est.loglik_term - est.energy_term;
  if (sim.n_paths > 1) {
    const Eigen::VectorXd per_path = ll - en;
    const double var = (per_path.array() - per_path.mean()).square().sum() / (sim.n_paths - 1.0);
    est.std_error = std::sqrt(var / sim.n_paths);
  }
  if (with_gradient) est.gradient = std::move(grad);
  return est;
}

}  // namespace sdevi
