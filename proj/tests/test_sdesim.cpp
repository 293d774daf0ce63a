#include "sdevi/lingauss.hpp"
#include "sdevi/mafbm.hpp"
#include "sdevi/sdesim.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace sdevi {
namespace {

const LinearSDEParams kToy{1.0, 0.0, 1.0, 0.0};
const ObservationSet kOneObs{{1.0}, {1.0}, 0.01};
const ObservationSet kFourObs{{0.2, 0.45, 0.7, 0.9}, {0.4, 0.9, 0.3, -0.2}, 0.02};

SimConfig sim(int paths, double dt, std::uint64_t seed = 0, int threads = 1) {
  SimConfig s;
  s.n_paths = paths;
  s.dt_max = dt;
  s.seed = seed;
  s.horizon = 1.0;
  s.threads = threads;
  return s;
}

MafbmDriver calibrated(double hurst, int k = 5) {
  const auto c = mafbm::default_config(hurst, k);
  return {c, mafbm::fit_omega(c)};
}

TEST(BuildGrid, Examples) {
  const std::vector<double> a{0.1};
  const auto g = build_grid(a, 0.1, 0.04);
  ASSERT_EQ(g.size(), 4u);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NEAR(g[1], 0.1 / 3, 1e-15);
  EXPECT_NEAR(g[2], 0.2 / 3, 1e-15);
  EXPECT_EQ(g[3], 0.1);
  EXPECT_EQ(build_grid({}, 0.5, 1.0), (std::vector<double>{0.0, 0.5}));
  const std::vector<double> b{0.05, 0.1};
  EXPECT_EQ(build_grid(b, 0.1, 0.05), (std::vector<double>{0.0, 0.05, 0.1}));
}

TEST(BuildGrid, AnchorsExactAndStepsBounded) {
  const std::vector<double> a{0.013, 0.2, 0.2001, 0.77};
  const auto g = build_grid(a, 1.3, 0.01);
  for (double t : a) EXPECT_NE(std::find(g.begin(), g.end(), t), g.end());
  for (std::size_t i = 1; i < g.size(); ++i) {
    EXPECT_GT(g[i], g[i - 1]);
    EXPECT_LE(g[i] - g[i - 1], 0.01 * (1 + 1e-12));
  }
  EXPECT_EQ(g.back(), 1.3);
  const std::vector<double> outside{1.5};
  EXPECT_THROW(build_grid(outside, 1.0, 0.1), PreconditionError);
}

TEST(EffectiveDt, ClampedByFastestFactor) {
  const auto bm = make_model(Driver::kBm, Variant::kLinear, kToy, std::nullopt, 0);
  EXPECT_EQ(effective_dt(bm, 1e-2), 1e-2);
  const auto fb = make_model(Driver::kMafbm, Variant::kLinear, kToy, calibrated(0.65), 0);
  EXPECT_NEAR(effective_dt(fb, 1e-2), kFastFactorStep / 1000.0, 1e-15);
  EXPECT_EQ(effective_dt(fb, 1e-4), 1e-4);
}

TEST(Model, ValidateRejectsTrainableMafbmControl) {
  auto m = make_model(Driver::kMafbm, Variant::kHybrid, kToy, calibrated(0.65), 0, 8);
  m.linear_frozen = false;
  EXPECT_THROW(m.validate(), ContractError);
  EXPECT_THROW(make_model(Driver::kMafbm, Variant::kLinear, kToy, std::nullopt, 0), PreconditionError);
}

TEST(ControlEval, HybridAtInitEqualsClosedForm) {
  const auto h = make_model(Driver::kBm, Variant::kHybrid, kToy, std::nullopt, 3, 16);
  Eigen::VectorXd x(1);
  for (double xv : {-0.5, 0.0, 0.8}) {
    for (double t : {0.0, 0.3, 0.95}) {
      x[0] = xv;
      EXPECT_EQ(control_eval(h, x, t, kFourObs, 1.0), lingauss::optimal_control(kToy, xv, t, kFourObs));
    }
  }
  x[0] = 0.0;
  EXPECT_NEAR(control_eval(h, x, 0.0, kOneObs, 1.0), 0.8316811, 1e-6);
}

TEST(ControlEval, MafbmHybridAtInitEqualsAugmentedControl) {
  const auto d = calibrated(0.65, 3);
  const auto h = make_model(Driver::kMafbm, Variant::kHybrid, kToy, d, 3, 16);
  Eigen::VectorXd z(4);
  z << 0.2, 0.01, -0.02, 0.03;
  EXPECT_EQ(control_eval(h, z, 0.1, kFourObs, 1.0),
            mafbm::augmented_optimal_control(h.augmented(), z, 0.1, kFourObs));
}

TEST(ControlEval, LinearPastLastObservationIsZero) {
  const auto m = make_model(Driver::kBm, Variant::kLinear, kToy, std::nullopt, 0);
  EXPECT_EQ(control_eval(m, Eigen::VectorXd::Constant(1, 0.4), 0.95, kFourObs, 1.0), 0.0);
  EXPECT_EQ(control_eval(m, Eigen::VectorXd::Constant(1, 0.4), 0.9, kFourObs, 1.0), 0.0);
}

TEST(ControlEval, NonlinearIgnoresLinearParameters) {
  auto m = make_model(Driver::kBm, Variant::kNonlinear, kToy, std::nullopt, 5, 16);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.3);
  const double before = control_eval(m, x, 0.25, kFourObs, 1.0);
  m.linear = {3.0, -2.0, 0.2, 1.0};
  EXPECT_EQ(control_eval(m, x, 0.25, kFourObs, 1.0), before);
  EXPECT_NE(before, 0.0);
}

TEST(Simulate, ShapesAndControlsMatchControlEval) {
  const auto m = make_model(Driver::kBm, Variant::kLinear, {1.3, 0.2, 0.8, 0.1}, std::nullopt, 0);
  const auto b = simulate(m, kFourObs, sim(5, 0.01));
  const Eigen::Index nodes = static_cast<Eigen::Index>(b.grid.size());
  ASSERT_EQ(b.states.size(), 1u);
  EXPECT_EQ(b.states[0].rows(), 5);
  EXPECT_EQ(b.states[0].cols(), nodes);
  EXPECT_EQ(b.controls.cols(), nodes - 1);
  EXPECT_EQ(b.noise.cols(), nodes - 1);
  EXPECT_TRUE((b.states[0].col(0).array() == 0.1).all());
  for (double t : kFourObs.times) EXPECT_NE(std::find(b.grid.begin(), b.grid.end(), t), b.grid.end());
  for (Eigen::Index p = 0; p < 5; ++p) {
    for (Eigen::Index n = 0; n + 1 < nodes; n += 13) {
      const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, b.states[0](p, n));
      EXPECT_NEAR(b.controls(p, n), control_eval(m, x, b.grid[static_cast<std::size_t>(n)], kFourObs, 1.0), 1e-9);
    }
  }
}

TEST(Simulate, MafbmControlsMatchControlEval) {
  const auto m = make_model(Driver::kMafbm, Variant::kHybrid, {1.3, 0.2, 0.8, 0.1}, calibrated(0.65, 3), 2, 8);
  const auto b = simulate(m, kFourObs, sim(3, 0.01));
  ASSERT_EQ(b.states.size(), 4u);
  const Eigen::Index nodes = static_cast<Eigen::Index>(b.grid.size());
  for (Eigen::Index p = 0; p < 3; ++p) {
    for (Eigen::Index n = 0; n + 1 < nodes; n += 17) {
      Eigen::VectorXd z(4);
      for (Eigen::Index k = 0; k < 4; ++k) z[k] = b.states[static_cast<std::size_t>(k)](p, n);
      EXPECT_NEAR(b.controls(p, n), control_eval(m, z, b.grid[static_cast<std::size_t>(n)], kFourObs, 1.0), 1e-8);
    }
  }
}

TEST(Simulate, DegenerateDynamicsStayAtStart) {
  const auto m = make_model(Driver::kBm, Variant::kLinear, {1e-12, 0.0, 1e-9, 0.7}, std::nullopt, 0);
  const ObservationSet none{{}, {}, 0.01};
  const std::vector<double> q{1.0};
  const auto mom = simulate_moments(m, none, sim(4000, 1e-2), q);
  EXPECT_NEAR(mom.mean[0], 0.7, 5 * 1e-4 / std::sqrt(4000.0));
  EXPECT_LE(std::sqrt(mom.cov(0, 0)), 1e-4 * (1 + 3 / std::sqrt(2 * 4000.0)));
}

TEST(Simulate, PriorMomentsMatchClosedForm) {
  const LinearSDEParams p{1.5, 0.6, 0.9, -0.4};
  const auto m = make_model(Driver::kBm, Variant::kLinear, p, std::nullopt, 0);
  const std::vector<double> q{0.25, 0.5, 1.0};
  const int n = 100000;
  const auto mom = simulate_moments(m, {{}, {}, 0.01}, sim(n, 1e-3, 7, 0), q);
  const auto exact = lingauss::ou_conditional_moments(p, p.x0, 0.0, q);
  for (int i = 0; i < 3; ++i) {
    EXPECT_LT(std::abs(mom.mean[i] - exact.mean[i]), 3 * std::sqrt(exact.cov(i, i) / n)) << i;
    for (int j = 0; j < 3; ++j) {
      const double se = std::sqrt((exact.cov(i, i) * exact.cov(j, j) + exact.cov(i, j) * exact.cov(i, j)) / n);
      EXPECT_LT(std::abs(mom.cov(i, j) - exact.cov(i, j)), 3 * se) << i << "," << j;
    }
  }
}

TEST(Simulate, AugmentedPriorMomentsMatchClosedForm) {
  MafbmDriver d;
  d.config.hurst = 0.5;
  d.config.k_factors = 1;
  d.config.gammas = {2.0};
  d.weights.omegas = Eigen::VectorXd::Ones(1);
  const auto m = make_model(Driver::kMafbm, Variant::kLinear, kToy, d, 0);
  const std::vector<double> q{0.5, 1.0};
  const int n = 100000;
  const auto mom = simulate_moments(m, {{}, {}, 0.01}, sim(n, 1e-3, 11, 0), q);
  const auto exact = mafbm::augmented_conditional_moments(m.augmented(), Eigen::VectorXd::Zero(2), 0.0, q);
  for (int i = 0; i < 2; ++i) {
    EXPECT_LT(std::abs(mom.mean[i] - exact.mean[i]), 3 * std::sqrt(exact.cov(i, i) / n));
    for (int j = 0; j < 2; ++j) {
      const double se = std::sqrt((exact.cov(i, i) * exact.cov(j, j) + exact.cov(i, j) * exact.cov(i, j)) / n);
      EXPECT_LT(std::abs(mom.cov(i, j) - exact.cov(i, j)), 3 * se);
    }
  }
}

TEST(Simulate, BitwiseAcrossThreadCounts) {
  const auto m = make_model(Driver::kBm, Variant::kNonlinear, {1.3, 0.2, 0.8, 0.1}, std::nullopt, 9, 16);
  const auto a = simulate(m, kFourObs, sim(37, 0.01, 5, 1));
  const auto b = simulate(m, kFourObs, sim(37, 0.01, 5, 4));
  const auto c = simulate(m, kFourObs, sim(37, 0.01, 5, 1));
  EXPECT_EQ(a.states[0], b.states[0]);
  EXPECT_EQ(a.controls, b.controls);
  EXPECT_EQ(a.noise, b.noise);
  EXPECT_EQ(a.states[0], c.states[0]);
  const auto e1 = elbo(m, kFourObs, sim(37, 0.01, 5, 1), true);
  const auto e4 = elbo(m, kFourObs, sim(37, 0.01, 5, 3), true);
  EXPECT_EQ(e1.value, e4.value);
  EXPECT_EQ(e1.gradient->control, e4.gradient->control);
  EXPECT_EQ(e1.gradient->linear, e4.gradient->linear);
}

TEST(Simulate, NonFiniteStateReportsPath) {
  auto m = make_model(Driver::kBm, Variant::kLinear, {1e-12, 1e308, 1.0, 1.7e308}, std::nullopt, 0);
  try {
    simulate(m, {{}, {}, 0.01}, sim(3, 0.1));
    FAIL() << "expected SimulationError";
  } catch (const SimulationError& e) {
    EXPECT_NE(std::string(e.what()).find("path"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Elbo, NoObservationsNoControlIsZero) {
  const auto m = make_model(Driver::kBm, Variant::kLinear, kToy, std::nullopt, 0);
  const auto e = elbo(m, {{}, {}, 0.01}, sim(50, 0.01));
  EXPECT_EQ(e.value, 0.0);
  EXPECT_EQ(e.energy_term, 0.0);
  EXPECT_EQ(e.loglik_term, 0.0);
}

TEST(Elbo, ToyProblemNearExactEvidence) {
  const auto m = make_model(Driver::kBm, Variant::kLinear, kToy, std::nullopt, 0);
  const auto e = elbo(m, kOneObs, sim(20000, 1e-3, 1, 0));
  const double exact = lingauss::OuPrior().log_evidence(kToy, kOneObs);
  EXPECT_NEAR(exact, -1.6415, 1e-3);
  EXPECT_LT(std::abs(e.value - exact), 0.03 + 3 * e.std_error);
  EXPECT_NEAR(e.value, e.loglik_term - e.energy_term, 1e-12);
  EXPECT_GE(e.energy_term, 0.0);
}

TEST(Elbo, NeverExceedsEvidence) {
  const lingauss::OuPrior prior;
  for (const auto& p : {kToy, LinearSDEParams{2.0, 0.5, 0.6, 0.3}, LinearSDEParams{0.4, -0.2, 1.4, -0.5}}) {
    const auto m = make_model(Driver::kBm, Variant::kLinear, p, std::nullopt, 0);
    const double dt = 2e-3;
    const auto e = elbo(m, kFourObs, sim(4000, dt, 3, 0));
    EXPECT_LE(e.value, prior.log_evidence(p, kFourObs) + 3 * e.std_error + 0.5 * dt * std::abs(e.value));
    EXPECT_NEAR(e.value, e.loglik_term - e.energy_term, 1e-12);
  }
}

TEST(Elbo, DiscretizationGapShrinks) {
  const auto m = make_model(Driver::kBm, Variant::kLinear, kToy, std::nullopt, 0);
  std::vector<double> values;
  for (double dt : {1e-2, 5e-3, 2.5e-3, 1.25e-3}) values.push_back(elbo(m, kOneObs, sim(100000, dt, 21, 0)).value);
  for (std::size_t i = 2; i < values.size(); ++i) {
    EXPECT_LT(std::abs(values[i] - values[i - 1]), std::abs(values[i - 1] - values[i - 2])) << i;
  }
}

TEST(Elbo, HybridAtInitBitwiseEqualsLinear) {
  const auto lin = make_model(Driver::kBm, Variant::kLinear, kToy, std::nullopt, 0);
  const auto hyb = make_model(Driver::kBm, Variant::kHybrid, kToy, std::nullopt, 4, 16);
  const auto a = elbo(lin, kFourObs, sim(64, 0.01, 8, 0));
  const auto b = elbo(hyb, kFourObs, sim(64, 0.01, 8, 0), true);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.std_error, b.std_error);
  const auto mf = calibrated(0.65, 3);
  const auto lf = make_model(Driver::kMafbm, Variant::kLinear, kToy, mf, 0);
  const auto hf = make_model(Driver::kMafbm, Variant::kHybrid, kToy, mf, 4, 16);
  EXPECT_EQ(elbo(lf, kFourObs, sim(16, 0.01, 8, 0)).value, elbo(hf, kFourObs, sim(16, 0.01, 8, 0)).value);
}

TEST(Elbo, ControlledMarginalsMatchSmoother) {
  const LinearSDEParams p{1.2, 0.3, 0.9, 0.2};
  const auto m = make_model(Driver::kBm, Variant::kLinear, p, std::nullopt, 0);
  const std::vector<double> q{0.1, 0.2, 0.33, 0.45, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0};
  const int n = 4000;
  const auto mom = simulate_moments(m, kFourObs, sim(n, 1e-3, 13, 0), q);
  const auto post = lingauss::posterior_marginals(p, kFourObs, q);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double se = std::sqrt(mom.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) / n);
    EXPECT_LT(std::abs(mom.mean[static_cast<Eigen::Index>(i)] - post[i].mean), 3 * se + 1e-3) << q[i];
  }
}

// Five-point central difference of the ELBO along one coordinate.
double fd5(const std::function<double(double)>& f, double h) {
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

TEST(Elbo, LinearParameterGradientMatchesFiniteDifferences) {
  auto m = make_model(Driver::kBm, Variant::kLinear, {1.3, 0.2, 0.8, 0.1}, std::nullopt, 0);
  m.linear_frozen = false;
  const auto s = sim(16, 0.01, 3, 1);
  const auto e = elbo(m, kFourObs, s, true);
  ASSERT_TRUE(e.gradient);
  double LinearSDEParams::*fields[] = {&LinearSDEParams::lambda, &LinearSDEParams::eta, &LinearSDEParams::varsigma,
                                       &LinearSDEParams::x0};
  for (int k = 0; k < 4; ++k) {
    const double fd = fd5(
        [&](double d) {
          SdeModel mm = m;
          mm.linear.*fields[k] += d;
          return elbo(mm, kFourObs, s).value;
        },
        1e-4);
    EXPECT_LT(rel(e.gradient->linear[k], fd), 1e-4) << "linear " << k << ": " << e.gradient->linear[k] << " vs " << fd;
  }
}

TEST(Elbo, NetworkGradientMatchesFiniteDifferences) {
  const auto m = make_model(Driver::kBm, Variant::kNonlinear, {1.3, 0.2, 0.8, 0.1}, std::nullopt, 6, 8);
  const auto s = sim(8, 0.02, 3, 1);
  const auto e = elbo(m, kFourObs, s, true);
  ASSERT_TRUE(e.gradient);
  const ModelGradient& g = *e.gradient;
  for (int k = 0; k < 4; ++k) {
    double LinearSDEParams::*fields[] = {&LinearSDEParams::lambda, &LinearSDEParams::eta, &LinearSDEParams::varsigma,
                                         &LinearSDEParams::x0};
    const double fd = fd5(
        [&](double d) {
          SdeModel mm = m;
          mm.linear.*fields[k] += d;
          return elbo(mm, kFourObs, s).value;
        },
        1e-4);
    EXPECT_LT(rel(g.linear[k], fd), 1e-4) << "linear " << k;
  }
  auto check_net = [&](DenseNet SdeModel::*net, const Eigen::VectorXd& grad, const char* name) {
    const Eigen::VectorXd flat = (m.*net).flatten();
    ASSERT_EQ(grad.size(), flat.size()) << name;
    for (Eigen::Index i = 0; i < flat.size(); i += 7) {
      const double fd = fd5(
          [&](double d) {
            SdeModel mm = m;
            Eigen::VectorXd f = flat;
            f[i] += d;
            (mm.*net).unflatten(f);
            return elbo(mm, kFourObs, s).value;
          },
          1e-4);
      EXPECT_LT(rel(grad[i], fd), 1e-4) << name << " " << i << ": " << grad[i] << " vs " << fd;
    }
  };
  check_net(&SdeModel::drift_net, g.drift, "drift");
  check_net(&SdeModel::diff_net, g.diff, "diffusion");
  check_net(&SdeModel::control_net, g.control, "control");
  check_net(&SdeModel::encoder, g.encoder, "encoder");
}

}  // namespace
}  // namespace sdevi
