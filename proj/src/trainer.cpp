#include "sdevi/trainer.hpp"

#include "sdevi/errors.hpp"
#include "sdevi/random.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace sdevi {

namespace {

constexpr std::uint64_t kNetSeedStream = 0x4E455453ull;
constexpr std::uint64_t kEvalSeedStream = 0x4556414Cull;

// Trainable parameters laid out as one flat vector:
// [log lambda, eta, log varsigma, x0 (when trainable)] [drift] [diff] [control] [encoder].
struct Layout {
  bool linear = false;
  bool nets = false;
  Eigen::Index size = 0;
};

Layout layout_of(const SdeModel& m) {
  Layout l;
  l.linear = !m.linear_frozen;
  l.nets = m.has_nets();
  if (l.linear) l.size += 4;
  if (l.nets) {
    l.size += static_cast<Eigen::Index>(m.drift_net.parameter_count() + m.diff_net.parameter_count() +
                                        m.control_net.parameter_count() + m.encoder.parameter_count());
  }
  return l;
}

Eigen::VectorXd pack(const SdeModel& m, const Layout& l) {
  Eigen::VectorXd v(l.size);
  Eigen::Index k = 0;
  if (l.linear) {
    v.segment(0, 4) = to_raw(m.linear);
    k = 4;
  }
  if (l.nets) {
    for (const DenseNet* net : {&m.drift_net, &m.diff_net, &m.control_net, &m.encoder}) {
      const Eigen::VectorXd f = net->flatten();
      v.segment(k, f.size()) = f;
      k += f.size();
    }
  }
  return v;
}

void unpack(SdeModel& m, const Layout& l, const Eigen::VectorXd& v) {
  Eigen::Index k = 0;
  if (l.linear) {
    m.linear = from_raw(v.segment(0, 4));
    k = 4;
  }
  if (l.nets) {
    for (DenseNet* net : {&m.drift_net, &m.diff_net, &m.control_net, &m.encoder}) {
      const auto n = static_cast<Eigen::Index>(net->parameter_count());
      net->unflatten(v.segment(k, n));
      k += n;
    }
  }
}

// Gradient of the loss (negative ELBO) in the packed layout.
Eigen::VectorXd loss_gradient(const SdeModel& m, const Layout& l, const ModelGradient& g) {
  Eigen::VectorXd v(l.size);
  Eigen::Index k = 0;
  if (l.linear) {
    v(0) = -g.linear(0) * m.linear.lambda;
    v(1) = -g.linear(1);
    v(2) = -g.linear(2) * m.linear.varsigma;
    v(3) = -g.linear(3);
    k = 4;
  }
  if (l.nets) {
    for (const Eigen::VectorXd* part : {&g.drift, &g.diff, &g.control, &g.encoder}) {
      v.segment(k, part->size()) = -*part;
      k += part->size();
    }
  }
  return v;
}

LossRecord make_record(int it, const ElboEstimate& e, double wall) {
  LossRecord r;
  r.iteration = it;
  r.neg_elbo = -e.value;
  r.loglik_term = e.loglik_term;
  r.energy_term = e.energy_term;
  r.wall_time_s = wall;
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 1) throw PreconditionError("iterations must be >= 1");
  if (!(learn_rate > 0.0)) throw PreconditionError("learn_rate must be positive");
  if (n_paths < 1) throw PreconditionError("n_paths must be >= 1");
  if (!(dt_max > 0.0)) throw PreconditionError("dt_max must be positive");
  if (log_every < 1) throw PreconditionError("log_every must be >= 1");
  if (block_paths < 1) throw PreconditionError("block_paths must be >= 1");
  if (eval_paths < 2) throw PreconditionError("eval_paths must be >= 2");
  if (!(grad_clip > 0.0)) throw PreconditionError("grad_clip must be positive");
  if (driver == Driver::kMafbm) {
    if (!(hurst > 0.0 && hurst < 1.0)) throw PreconditionError("hurst must lie in (0, 1)");
    if (k_factors < 1) throw PreconditionError("k must be >= 1");
  }
}

Stage1Result stage1_fit(const Dataset& data, const TrainConfig& config) {
  config.validate();
  Stage1Result out;
  lingauss::FitOptions opts;
  opts.steps = config.fit_steps;
  opts.step_size = config.fit_step_size;
  const LinearSDEParams init = lingauss::default_fit_init(data.obs);
  lingauss::FitResult fit;
  if (config.driver == Driver::kMafbm) {
    const MafbmConfig mc = mafbm::default_config(config.hurst, config.k_factors, config.gamma_ratio, data.horizon);
    const MafbmWeights w = mafbm::fit_omega(mc);
    out.mafbm = MafbmDriver{mc, w};
    fit = lingauss::fit_linear(data.obs, mafbm::AugmentedPrior(mc, w), init, opts);
  } else {
    fit = lingauss::fit_linear(data.obs, lingauss::OuPrior(), init, opts);
  }
  out.params = fit.params;
  out.loglik = fit.loglik;
  out.initial_loglik = fit.initial_loglik;
  return out;
}

SdeModel initial_model(const Stage1Result& stage1, const TrainConfig& config, Variant variant) {
  return make_model(config.driver, variant, stage1.params, stage1.mafbm,
                    rng::derive_seed(config.seed, kNetSeedStream), config.hidden);
}

SimConfig sim_config(const TrainConfig& config, const Dataset& data, std::uint64_t seed, int n_paths) {
  SimConfig s;
  s.dt_max = config.dt_max;
  s.n_paths = n_paths;
  s.seed = seed;
  s.horizon = data.horizon;
  s.threads = config.threads;
  s.block_paths = config.block_paths;
  return s;
}

TrainResult train(SdeModel model, const Dataset& data, const TrainConfig& config, const RecordCallback& on_record) {
  config.validate();
  model.validate();
  const Layout layout = layout_of(model);
  Eigen::VectorXd theta = pack(model, layout);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(layout.size);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(layout.size);
  const bool learn = layout.size > 0;

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  SdeModel last_good = model;
  for (int it = 0; it < config.iterations; ++it) {
    const SimConfig sim = sim_config(config, data, rng::derive_seed(config.seed, static_cast<std::uint64_t>(it)),
                                     config.n_paths);
    ElboEstimate est;
    try {
      est = elbo(model, data.obs, sim, learn);
    } catch (const NumericError& e) {
      throw TrainingError(std::string("iteration ") + std::to_string(it) + ": " + e.what(), last_good, result.records);
    }
    if (!std::isfinite(est.value)) {
      throw TrainingError("iteration " + std::to_string(it) + ": non-finite loss", last_good, result.records);
    }
    last_good = model;
    if (it % config.log_every == 0 || it + 1 == config.iterations) {
      const double wall = config.wall_time
                              ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
                              : 0.0;
      result.records.push_back(make_record(it, est, wall));
      if (on_record) on_record(result.records.back());
    }
    if (!learn) continue;

    Eigen::VectorXd g = loss_gradient(model, layout, *est.gradient);
    if (!g.allFinite()) {
      throw TrainingError("iteration " + std::to_string(it) + ": non-finite gradient", last_good, result.records);
    }
    const double norm = g.norm();
    if (norm > config.grad_clip) g *= config.grad_clip / norm;
    const int step = it + 1;
    m1 = config.beta1 * m1 + (1.0 - config.beta1) * g;
    m2 = config.beta2 * m2 + (1.0 - config.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config.beta1, step);
    const double c2 = 1.0 - std::pow(config.beta2, step);
    theta.array() -= config.learn_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.adam_eps);
    unpack(model, layout, theta);
  }
  result.model = std::move(model);
  return result;
}

CompareResult compare_variants(const Dataset& data, const TrainConfig& config) {
  CompareResult out;
  out.stage1 = stage1_fit(data, config);
  out.eval_seed = rng::derive_seed(config.seed, kEvalSeedStream);
  const std::array<Variant, 3> order{Variant::kLinear, Variant::kNonlinear, Variant::kHybrid};
  for (std::size_t i = 0; i < order.size(); ++i) {
    TrainConfig c = config;
    c.variant = order[i];
    VariantRun& run = out.runs[i];
    run.variant = order[i];
    run.result = train(initial_model(out.stage1, c, order[i]), data, c);
    run.final_eval = elbo(run.result.model, data.obs, sim_config(c, data, out.eval_seed, c.eval_paths), false);
  }
  return out;
}

void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& records) {
  out << "iter,neg_elbo,loglik_term,energy_term,wall_time_s\n";
  char buf[256];
  for (const LossRecord& r : records) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.neg_elbo, r.loglik_term,
                  r.energy_term, r.wall_time_s);
    out << buf;
  }
}

std::string loss_csv(const std::vector<LossRecord>& records) {
  std::ostringstream ss;
  write_loss_csv(ss, records);
  return ss.str();
}

}  // namespace sdevi
