// End-to-end acceptance checks. One PASS/FAIL line per criterion, detail lines
// indented below it. Exits 1 when any criterion fails; arguments pick criteria by name.

#include "cli.hpp"
#include "sdevi/dataio.hpp"
#include "sdevi/diffnet.hpp"
#include "sdevi/lingauss.hpp"
#include "sdevi/mafbm.hpp"
#include "sdevi/sdesim.hpp"
#include "sdevi/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace sdevi;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Tolerances and budgets.
constexpr double kElboTolerance = 0.03;
constexpr double kElboExactStated = -1.6415;
constexpr double kElboBudgetS = 60.0;
constexpr double kSmootherSigmas = 3.0;
constexpr double kSmootherBudgetS = 120.0;
constexpr double kFig1StartRatio = 10.0;     // hybrid start <= nonlinear start / 10
constexpr double kFig1ReachFraction = 0.5;   // of the iteration budget
constexpr double kFig1MarginSe = 1.0;        // hybrid <= linear - 1 SE
constexpr double kFig1BudgetS = 1800.0;
constexpr int kFig1Iterations = 300;
constexpr int kFig1Paths = 16;
constexpr double kGradRelTolerance = 1e-4;
constexpr double kNetGradRelTolerance = 1e-5;
constexpr double kMomentSigmas = 3.0;
constexpr int kMomentPaths = 1000000;
constexpr double kCalibrationTolerance = 0.05;
constexpr double kRecoveryLambda = 0.2;
constexpr double kRecoveryMean = 0.1;
constexpr double kGridNats = 0.1;

const fs::path kFixture = fs::path(SDEVI_SOURCE_DIR) / "fixtures" / "dtb3.csv";

int failures = 0;

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

void report(const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS  " : "FAIL  ") << name << "  " << detail << std::endl;
  if (!ok) ++failures;
}

void detail(const std::string& line) { std::cout << "        " << line << std::endl; }

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

SimConfig sim(int paths, double dt, std::uint64_t seed, double horizon = 1.0, int block = 256) {
  SimConfig s;
  s.n_paths = paths;
  s.dt_max = dt;
  s.seed = seed;
  s.horizon = horizon;
  s.threads = 0;
  s.block_paths = block;
  return s;
}

const ObservationSet kFourObs{{0.2, 0.45, 0.7, 0.9}, {0.4, 0.9, 0.3, -0.2}, 0.02};

void elbo_tightness() {
  const auto t0 = Clock::now();
  const LinearSDEParams toy{1.0, 0.0, 1.0, 0.0};
  const ObservationSet one{{1.0}, {1.0}, 0.01};
  const double exact = lingauss::OuPrior().log_evidence(toy, one);
  const auto m = make_model(Driver::kBm, Variant::kLinear, toy, std::nullopt, 0);
  const auto e = elbo(m, one, sim(100000, 1e-3, 0));
  const double secs = since(t0);
  const bool ok = std::abs(e.value - exact) <= kElboTolerance && std::abs(exact - kElboExactStated) < 1e-4 &&
                  secs < kElboBudgetS;
  std::ostringstream d;
  d << "elbo " << fmt("%.5f", e.value) << " (se " << fmt("%.5f", e.std_error) << ") vs exact " << fmt("%.5f", exact)
    << ", |diff| " << fmt("%.5f", std::abs(e.value - exact)) << " <= " << kElboTolerance << ", " << fmt("%.1f", secs)
    << " s < " << kElboBudgetS << " s";
  report("elbo-tightness", ok, d.str());
}

void smoother_equivalence() {
  const auto t0 = Clock::now();
  const LinearSDEParams p{1.2, 0.3, 0.9, 0.2};
  const auto m = make_model(Driver::kBm, Variant::kLinear, p, std::nullopt, 0);
  const std::vector<double> q{0.1, 0.2, 0.33, 0.45, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0};
  const int n = 10000;
  const auto mom = simulate_moments(m, kFourObs, sim(n, 1e-4, 13), q);
  const auto post = lingauss::posterior_marginals(p, kFourObs, q);
  double worst = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double se = std::sqrt(mom.cov(k, k) / n);
    worst = std::max(worst, std::abs(mom.mean[k] - post[i].mean) / se);
  }
  const double secs = since(t0);
  report("smoother-equivalence", worst <= kSmootherSigmas && secs < kSmootherBudgetS,
         "10 query times, S=1e4: worst |mean - smoother| = " + fmt("%.2f", worst) + " SE <= 3, " +
             fmt("%.1f", secs) + " s < 120 s");
}

struct Fig1Run {
  Driver driver;
  std::uint64_t seed;
  CompareResult result;
};

void fig1_reproduction() {
  const auto t0 = Clock::now();
  const Dataset data = load_any_dataset(kFixture);
  std::vector<Fig1Run> runs;
  for (Driver drv : {Driver::kBm, Driver::kMafbm}) {
    for (std::uint64_t seed : {0, 1, 2}) {
      TrainConfig c;
      c.driver = drv;
      c.seed = seed;
      c.iterations = kFig1Iterations;
      c.n_paths = kFig1Paths;
      c.block_paths = kFig1Paths;
      const auto ts = Clock::now();
      runs.push_back({drv, seed, compare_variants(data, c)});
      detail(to_string(drv) + " seed " + std::to_string(seed) + " trained in " + fmt("%.0f", since(ts)) + " s");
    }
  }
  const double secs = since(t0);

  bool a_ok = true, b_ok = true, c_ok = true;
  for (const Fig1Run& r : runs) {
    const auto& lin = r.result.runs[0];
    const auto& nl = r.result.runs[1];
    const auto& hy = r.result.runs[2];
    const std::string tag = to_string(r.driver) + " seed " + std::to_string(r.seed) + ": ";

    const double hy0 = hy.result.records.front().neg_elbo;
    const double nl0 = nl.result.records.front().neg_elbo;
    const bool a = hy0 <= nl0 / kFig1StartRatio;
    a_ok = a_ok && a;
    detail(tag + "(a) start hybrid " + fmt("%.2f", hy0) + " vs nonlinear " + fmt("%.2f", nl0) + (a ? "" : "  <- fails"));

    const double nl_final = -nl.final_eval.value;
    int reached = -1;
    for (const LossRecord& rec : hy.result.records) {
      if (rec.neg_elbo <= nl_final) {
        reached = rec.iteration;
        break;
      }
    }
    const bool b = reached >= 0 && reached <= kFig1ReachFraction * kFig1Iterations;
    b_ok = b_ok && b;
    detail(tag + "(b) nonlinear final " + fmt("%.2f", nl_final) + ", hybrid reaches it at iteration " +
           std::to_string(reached) + (b ? "" : "  <- fails"));

    if (r.driver == Driver::kMafbm) {
      const double hl = -hy.final_eval.value;
      const double ll = -lin.final_eval.value;
      const double se = std::max(hy.final_eval.std_error, lin.final_eval.std_error);
      const bool c = hl <= ll - kFig1MarginSe * se;
      c_ok = c_ok && c;
      detail(tag + "(c) final hybrid " + fmt("%.3f", hl) + " vs linear " + fmt("%.3f", ll) + " - SE " +
             fmt("%.3f", se) + (c ? "" : "  <- fails"));
    }
  }
  const bool t_ok = secs < kFig1BudgetS;
  std::ostringstream d;
  d << "(a) " << (a_ok ? "ok" : "FAILED") << ", (b) " << (b_ok ? "ok" : "FAILED") << ", (c) " << (c_ok ? "ok" : "FAILED")
    << ", " << kFig1Iterations << " iterations x 6 comparisons in " << fmt("%.0f", secs) << " s < 1800 s";
  report("fig1-reproduction", a_ok && b_ok && c_ok && t_ok, d.str());
}

double fd5(const std::function<double(double)>& f, double h) {
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Worst relative error over every trainable parameter of the model.
double elbo_gradient_error(const SdeModel& m, const ObservationSet& obs, const SimConfig& s, int& checked) {
  const auto e = elbo(m, obs, s, true);
  const ModelGradient& g = *e.gradient;
  auto value = [&](const SdeModel& mm) { return elbo(mm, obs, s).value; };
  double worst = 0.0;
  if (!m.linear_frozen) {
    double LinearSDEParams::*fields[] = {&LinearSDEParams::lambda, &LinearSDEParams::eta, &LinearSDEParams::varsigma,
                                         &LinearSDEParams::x0};
    for (int k = 0; k < 4; ++k) {
      const double fd = fd5(
          [&](double d) {
            SdeModel mm = m;
            mm.linear.*fields[k] += d;
            return value(mm);
          },
          1e-4);
      worst = std::max(worst, rel_error(g.linear[k], fd));
      ++checked;
    }
  }
  if (m.has_nets()) {
    const std::pair<DenseNet SdeModel::*, const Eigen::VectorXd*> nets[] = {{&SdeModel::drift_net, &g.drift},
                                                                            {&SdeModel::diff_net, &g.diff},
                                                                            {&SdeModel::control_net, &g.control},
                                                                            {&SdeModel::encoder, &g.encoder}};
    for (const auto& [net, grad] : nets) {
      const Eigen::VectorXd flat = (m.*net).flatten();
      for (Eigen::Index i = 0; i < flat.size(); ++i) {
        const double fd = fd5(
            [&](double d) {
              SdeModel mm = m;
              Eigen::VectorXd f = flat;
              f[i] += d;
              (mm.*net).unflatten(f);
              return value(mm);
            },
            1e-4);
        worst = std::max(worst, rel_error((*grad)[i], fd));
        ++checked;
      }
    }
  }
  return worst;
}

void gradient_integrity() {
  const LinearSDEParams p{1.3, 0.2, 0.8, 0.1};
  const auto mc = mafbm::default_config(0.65, 2);
  const MafbmDriver md{mc, mafbm::fit_omega(mc)};
  const SimConfig s = sim(8, 0.02, 3, 1.0, 4);

  std::vector<std::pair<std::string, SdeModel>> models;
  auto lin = make_model(Driver::kBm, Variant::kLinear, p, std::nullopt, 0);
  lin.linear_frozen = false;
  models.emplace_back("bm linear", lin);
  models.emplace_back("bm nonlinear", make_model(Driver::kBm, Variant::kNonlinear, p, std::nullopt, 6, 8));
  models.emplace_back("mafbm nonlinear", make_model(Driver::kMafbm, Variant::kNonlinear, p, md, 6, 8));
  for (Driver drv : {Driver::kBm, Driver::kMafbm}) {
    std::optional<MafbmDriver> d;
    if (drv == Driver::kMafbm) d = md;
    // trained-looking hybrid: nonzero output layers
    SdeModel h = make_model(drv, Variant::kHybrid, p, d, 6, 8);
    const SdeModel donor = make_model(drv, Variant::kNonlinear, p, d, 7, 8);
    h.drift_net = donor.drift_net;
    h.diff_net = donor.diff_net;
    h.control_net = donor.control_net;
    models.emplace_back(to_string(drv) + " hybrid", h);
  }
  double worst = 0.0;
  int total = 0;
  for (const auto& [name, m] : models) {
    int checked = 0;
    const double w = elbo_gradient_error(m, kFourObs, s, checked);
    detail(name + ": " + std::to_string(checked) + " parameters, worst relative error " + fmt("%.2e", w));
    worst = std::max(worst, w);
    total += checked;
  }

  // Network level, full width.
  const DenseNet net = DenseNet::init({1, kHiddenWidth, kHiddenWidth, 1}, 11, false);
  Eigen::MatrixXd xs(1, 5);
  xs << -1.0, -0.3, 0.0, 0.4, 1.2;
  const DifferentiableFn loss = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    DenseNet n = net;
    n.unflatten(theta);
    ad::Tape tape(grad != nullptr);
    const BoundNet b = bind(tape, n, grad != nullptr);
    const ad::Var out = ad::sum(ad::square(forward(b, tape.constant(xs))));
    if (grad) {
      tape.backward(out);
      *grad = gradient(tape, b);
    }
    return out.scalar();
  };
  const auto gc = grad_check(loss, net.flatten(), 1e-5);
  detail("dense net " + std::to_string(net.parameter_count()) + " parameters: worst relative error " +
         fmt("%.2e", gc.max_rel_error));

  report("gradient-integrity", worst <= kGradRelTolerance && gc.max_rel_error <= kNetGradRelTolerance,
         "ELBO: " + std::to_string(total) + " parameters, worst " + fmt("%.2e", worst) + " <= 1e-4; net: worst " +
             fmt("%.2e", gc.max_rel_error) + " <= 1e-5");
}

// Worst deviation of simulated mean and covariance from the closed form, in standard errors.
double moment_sigmas(const MomentSummary& mom, const ConditionalMoments& exact, int n) {
  double worst = 0.0;
  const Eigen::Index k = exact.mean.size();
  for (Eigen::Index i = 0; i < k; ++i) {
    worst = std::max(worst, std::abs(mom.mean[i] - exact.mean[i]) / std::sqrt(exact.cov(i, i) / n));
    for (Eigen::Index j = 0; j < k; ++j) {
      const double se = std::sqrt((exact.cov(i, i) * exact.cov(j, j) + exact.cov(i, j) * exact.cov(i, j)) / n);
      worst = std::max(worst, std::abs(mom.cov(i, j) - exact.cov(i, j)) / se);
    }
  }
  return worst;
}

void moment_validation() {
  const auto t0 = Clock::now();
  const LinearSDEParams p{1.5, 0.6, 0.9, -0.4};
  const auto bm = make_model(Driver::kBm, Variant::kLinear, p, std::nullopt, 0);
  const std::vector<double> q{0.25, 0.5, 1.0};
  const ObservationSet none{{}, {}, 0.01};
  const auto mom = simulate_moments(bm, none, sim(kMomentPaths, 1e-3, 7), q);
  const double w_bm = moment_sigmas(mom, lingauss::ou_conditional_moments(p, p.x0, 0.0, q), kMomentPaths);
  detail("bm: worst deviation " + fmt("%.2f", w_bm) + " SE over means and covariances at 3 times");

  MafbmDriver d;
  d.config.hurst = 0.5;
  d.config.k_factors = 1;
  d.config.gammas = {2.0};
  d.weights.omegas = Eigen::VectorXd::Ones(1);
  const auto fb = make_model(Driver::kMafbm, Variant::kLinear, {1.0, 0.0, 1.0, 0.0}, d, 0);
  const std::vector<double> qf{0.5, 1.0};
  const auto momf = simulate_moments(fb, none, sim(kMomentPaths, 1e-3, 11), qf);
  const double w_fb = moment_sigmas(
      momf, mafbm::augmented_conditional_moments(fb.augmented(), Eigen::VectorXd::Zero(2), 0.0, qf), kMomentPaths);
  detail("mafbm (K=1, gamma=2): worst deviation " + fmt("%.2f", w_fb) + " SE");
  report("moment-validation", w_bm <= kMomentSigmas && w_fb <= kMomentSigmas,
         "1e6 paths: bm " + fmt("%.2f", w_bm) + " SE, mafbm " + fmt("%.2f", w_fb) + " SE <= 3, " +
             fmt("%.0f", since(t0)) + " s");
}

void calibration() {
  double worst = 0.0;
  for (double h : {0.3, 0.5, 0.65, 0.8}) {
    const auto c = mafbm::default_config(h, 5, 10.0, 1.0);
    const auto w = mafbm::fit_omega(c);
    double err = 0.0;
    for (double s : mafbm::calibration_times(1.0)) {
      const double target = std::pow(s, 2 * h);
      err = std::max(err, std::abs(mafbm::driver_variance(c.gammas, w.omegas, s) - target) / target);
    }
    detail("H=" + fmt("%.2f", h) + ": max relative error " + fmt("%.4f", err));
    worst = std::max(worst, err);
  }
  report("mafbm-calibration", worst <= kCalibrationTolerance,
         "K=5, r=10: worst relative error " + fmt("%.4f", worst) + " <= 0.05");
}

double grid_best(const ObservationSet& obs, double x0, const LinearSDEParams& centre) {
  const lingauss::OuPrior prior;
  double best = -1e300;
  for (int i = 0; i < 25; ++i) {
    for (int j = 0; j < 25; ++j) {
      for (int k = 0; k < 25; ++k) {
        const LinearSDEParams p{centre.lambda * std::exp(-1.0 + i / 12.0), centre.eta * std::exp(-1.0 + j / 12.0),
                                centre.varsigma * std::exp(-1.0 + k / 12.0), x0};
        best = std::max(best, prior.log_evidence(p, obs));
      }
    }
  }
  return best;
}

void parameter_recovery() {
  const LinearSDEParams truth{2.0, 1.0, 0.5, 0.5};
  std::vector<double> times;
  for (int i = 0; i < 500; ++i) times.push_back(0.5 * i);
  Dataset d;
  d.obs = synth_ou(truth, times, 7, 0.01);
  d.horizon = times.back();
  const auto s = stage1_fit(d, TrainConfig{});
  const double el = std::abs(s.params.lambda - truth.lambda) / truth.lambda;
  const double em = std::abs(s.params.stationary_mean() - truth.stationary_mean()) / truth.stationary_mean();
  const double grid = grid_best(d.obs, s.params.x0, truth);
  report("parameter-recovery", el <= kRecoveryLambda && em <= kRecoveryMean && s.loglik >= grid - kGridNats,
         "500 obs: lambda err " + fmt("%.3f", el) + " <= 0.2, eta/lambda err " + fmt("%.3f", em) +
             " <= 0.1, fit loglik " + fmt("%.3f", s.loglik) + " vs grid best " + fmt("%.3f", grid) + " (within 0.1)");
}

std::vector<std::pair<std::string, std::string>> files_of(const fs::path& dir, bool skip_manifest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (skip_manifest && name == "run.json") continue;
    out.emplace_back(name, read_text_file(e.path()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / "sdevi_acceptance_determinism";
  fs::remove_all(root);
  bool ok = true;
  for (const std::string cmd : {"train", "compare"}) {
    std::vector<std::vector<std::pair<std::string, std::string>>> with_manifest, without;
    // same output path every time, so manifests can match too
    const fs::path out = root / cmd;
    for (const std::string threads : {"1", "1", "4"}) {
      fs::remove_all(out);
      std::vector<std::string> args{cmd, "--data", kFixture.string(), "--n", "80", "--driver", "mafbm", "--iters", "4",
                                    "--paths", "8", "--block-paths", "2", "--fit-steps", "200", "--seed", "0",
                                    "--threads", threads, "--out", out.string()};
      if (cmd == "train") args.insert(args.begin() + 1, {"--variant", "hybrid"});
      if (cmd == "compare") args.insert(args.end(), {"--eval-paths", "16"});
      std::ostringstream sink, err;
      if (cli::run(args, sink, err) != 0) {
        detail(cmd + " failed: " + err.str());
        ok = false;
        continue;
      }
      with_manifest.push_back(files_of(out, false));
      without.push_back(files_of(out, true));
    }
    if (with_manifest.size() != 3) continue;
    const bool repeat = with_manifest[0] == with_manifest[1];
    const bool threads = without[0] == without[2];
    detail(cmd + ": " + std::to_string(with_manifest[0].size()) + " files; repeat identical " +
           (repeat ? "yes" : "no") + ", 1 vs 4 threads identical " + (threads ? "yes" : "no"));
    ok = ok && repeat && threads && !with_manifest[0].empty();
  }
  fs::remove_all(root);
  report("determinism", ok, "train and compare outputs byte-identical across repeats and thread counts");
}

}  // namespace

int main(int argc, char** argv) {
  // optional arguments select criteria by name
  const std::vector<std::pair<std::string, void (*)()>> criteria{
      {"elbo-tightness", elbo_tightness},   {"smoother-equivalence", smoother_equivalence},
      {"gradient-integrity", gradient_integrity}, {"moment-validation", moment_validation},
      {"mafbm-calibration", calibration},   {"parameter-recovery", parameter_recovery},
      {"determinism", determinism},         {"fig1-reproduction", fig1_reproduction}};
  const std::vector<std::string> chosen(argv + 1, argv + argc);
  const auto t0 = Clock::now();
  for (const auto& [name, check] : criteria) {
    if (chosen.empty() || std::find(chosen.begin(), chosen.end(), name) != chosen.end()) check();
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
            << fmt("%.0f", since(t0)) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
