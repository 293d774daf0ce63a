#include "cli.hpp"

#include "sdevi/dataio.hpp"
#include "sdevi/errors.hpp"
#include "sdevi/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <ostream>
#include <sstream>

#ifndef SDEVI_DEFAULT_DATA
#define SDEVI_DEFAULT_DATA "fixtures/dtb3.csv"
#endif

namespace sdevi::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kSynopsis =
    "usage: sdevi <command> [flags]\n"
    "commands:\n"
    "  ingest      --data CSV --out DATASET.json [--n 500] [--sigma-obs 0.1]\n"
    "  fit-linear  --data PATH [--driver bm|mafbm] [--hurst 0.65] [--k 5]\n"
    "  train       --variant linear|nonlinear|hybrid --driver bm|mafbm [--hurst] [--k] [--iters] [--paths]\n"
    "              [--dt-max] [--lr] [--seed] [--data] [--out DIR]\n"
    "  compare     [same flags as train, without --variant] [--eval-paths]\n"
    "  eval        --checkpoint FILE [--data] [--paths] [--seed] [--dt-max]\n"
    "  simulate    --checkpoint FILE [--data] [--paths] [--seed] [--dt-max] --out PATHS.csv\n"
    "  replay      MANIFEST (re-run the invocation a manifest records)\n"
    "run 'sdevi <command> --help' for details\n";

std::string default_data() {
  if (fs::exists("fixtures/dtb3.csv")) return "fixtures/dtb3.csv";
  return SDEVI_DEFAULT_DATA;
}

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Resolved flag values in declaration order; enough to replay the run.
struct Manifest {
  std::string command;
  std::vector<std::pair<std::string, std::string>> flags;

  void add(const std::string& name, const std::string& value) { flags.emplace_back(name, value); }
  void add(const std::string& name, double value) { add(name, fmt9(value)); }
  void add(const std::string& name, int value) { add(name, std::to_string(value)); }
  void add(const std::string& name, std::uint64_t value) { add(name, std::to_string(value)); }
  void add_flag(const std::string& name, bool on) {
    if (on) add(name, std::string());
  }

  std::string text() const {
    json j;
    j["command"] = command;
    json f = json::object();
    json argv = json::array({command});
    for (const auto& [k, v] : flags) {
      f[k] = v;
      argv.push_back("--" + k);
      if (!v.empty()) argv.push_back(v);
    }
    j["flags"] = f;
    j["argv"] = argv;
    return j.dump(1) + "\n";
  }
};

struct Common {
  std::string data;
  int n = 500;
  double sigma_obs = 0.1;
  std::string manifest;
};

void add_data_flags(CLI::App* app, Common& c, bool data_required) {
  auto* opt = app->add_option("--data", c.data, "FRED-style CSV or dataset file");
  if (data_required) {
    opt->required();
  } else {
    c.data = default_data();
    opt->capture_default_str();
  }
  app->add_option("--n", c.n, "records taken from a CSV")->capture_default_str()->check(CLI::Range(2, 1 << 30));
  app->add_option("--sigma-obs", c.sigma_obs, "observation noise sd (standardized units)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--manifest", c.manifest, "where to write the run manifest");
}

void add_data_manifest(Manifest& m, const Common& c) {
  m.add("data", c.data);
  m.add("n", c.n);
  m.add("sigma-obs", c.sigma_obs);
}

struct TrainFlags {
  std::string variant = "hybrid";
  std::string driver = "bm";
  std::string out;
  TrainConfig cfg;
};

void add_train_flags(CLI::App* app, TrainFlags& f, bool with_variant) {
  if (with_variant) {
    app->add_option("--variant", f.variant, "linear, nonlinear or hybrid")
        ->capture_default_str()
        ->check(CLI::IsMember({"linear", "nonlinear", "hybrid"}));
  }
  app->add_option("--driver", f.driver, "bm or mafbm")->capture_default_str()->check(CLI::IsMember({"bm", "mafbm"}));
  app->add_option("--hurst", f.cfg.hurst, "Hurst index (mafbm)")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  app->add_option("--k", f.cfg.k_factors, "number of OU factors (mafbm)")->capture_default_str()->check(CLI::Range(1, 64));
  app->add_option("--iters", f.cfg.iterations, "training iterations")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--paths", f.cfg.n_paths, "Monte Carlo paths per iteration")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--dt-max", f.cfg.dt_max, "largest Euler step")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--lr", f.cfg.learn_rate, "learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--seed", f.cfg.seed, "random seed")->capture_default_str();
  app->add_option("--log-every", f.cfg.log_every, "iterations between loss records")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--fit-steps", f.cfg.fit_steps, "stage-1 optimizer steps")->capture_default_str()->check(CLI::NonNegativeNumber);
  app->add_option("--threads", f.cfg.threads, "worker threads (0: all cores)")->capture_default_str()->check(CLI::NonNegativeNumber);
  app->add_option("--block-paths", f.cfg.block_paths, "paths per tape")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_flag("--wall-time", f.cfg.wall_time, "record elapsed seconds in the loss CSV");
}

void add_train_manifest(Manifest& m, const TrainFlags& f, bool with_variant) {
  if (with_variant) m.add("variant", f.variant);
  m.add("driver", f.driver);
  m.add("hurst", f.cfg.hurst);
  m.add("k", f.cfg.k_factors);
  m.add("iters", f.cfg.iterations);
  m.add("paths", f.cfg.n_paths);
  m.add("dt-max", f.cfg.dt_max);
  m.add("lr", f.cfg.learn_rate);
  m.add("seed", f.cfg.seed);
  m.add("log-every", f.cfg.log_every);
  m.add("fit-steps", f.cfg.fit_steps);
  m.add("threads", f.cfg.threads);
  m.add("block-paths", f.cfg.block_paths);
  m.add_flag("wall-time", f.cfg.wall_time);
}

struct SampleFlags {
  std::string checkpoint;
  int paths = 1024;
  std::uint64_t seed = 0;
  double dt_max = 1e-3;
  int threads = 0;
  int block_paths = 64;
  std::string out;
};

void add_sample_flags(CLI::App* app, SampleFlags& f, int default_paths) {
  f.paths = default_paths;
  app->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();
  app->add_option("--paths", f.paths, "Monte Carlo paths")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--seed", f.seed, "random seed")->capture_default_str();
  app->add_option("--dt-max", f.dt_max, "largest Euler step")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--threads", f.threads, "worker threads (0: all cores)")->capture_default_str()->check(CLI::NonNegativeNumber);
  app->add_option("--block-paths", f.block_paths, "paths per block")->capture_default_str()->check(CLI::PositiveNumber);
}

void add_sample_manifest(Manifest& m, const SampleFlags& f) {
  m.add("checkpoint", f.checkpoint);
  m.add("paths", f.paths);
  m.add("seed", f.seed);
  m.add("dt-max", f.dt_max);
  m.add("threads", f.threads);
  m.add("block-paths", f.block_paths);
}

void write_manifest(const Manifest& m, const std::string& path) { write_text_file(path, m.text()); }

std::string manifest_path(const Common& c, const std::string& fallback) {
  return c.manifest.empty() ? fallback : c.manifest;
}

void print_params(std::ostream& out, const Stage1Result& s) {
  out << "lambda=" << fmt9(s.params.lambda) << " eta=" << fmt9(s.params.eta)
      << " varsigma=" << fmt9(s.params.varsigma) << " x0=" << fmt9(s.params.x0) << "\n";
  out << "loglik=" << fmt9(s.loglik) << " (initial " << fmt9(s.initial_loglik) << ")\n";
}

void write_summary(const fs::path& path, const CompareResult& r) {
  json j;
  j["stage1"] = {{"lambda", r.stage1.params.lambda},
                 {"eta", r.stage1.params.eta},
                 {"varsigma", r.stage1.params.varsigma},
                 {"x0", r.stage1.params.x0},
                 {"loglik", r.stage1.loglik}};
  j["eval_seed"] = r.eval_seed;
  json runs = json::array();
  for (const VariantRun& v : r.runs) {
    runs.push_back({{"variant", to_string(v.variant)},
                    {"first_loss", v.result.records.front().neg_elbo},
                    {"last_loss", v.result.records.back().neg_elbo},
                    {"final_eval_loss", -v.final_eval.value},
                    {"final_eval_std_error", v.final_eval.std_error},
                    {"final_eval_paths", v.final_eval.n_paths}});
  }
  j["runs"] = runs;
  write_text_file(path, j.dump(1) + "\n");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Variational inference for 1-d SDEs with a closed-form linear control", "sdevi"};
  app.require_subcommand(1);
  app.allow_extras(false);

  Common ingest_c;
  std::string ingest_out;
  auto* ingest = app.add_subcommand("ingest", "CSV -> dataset file");
  add_data_flags(ingest, ingest_c, true);
  ingest->add_option("--out", ingest_out, "dataset file to write")->required();

  Common fit_c;
  TrainFlags fit_f;
  auto* fit = app.add_subcommand("fit-linear", "stage-1 fit of the linear prior");
  add_data_flags(fit, fit_c, false);
  fit->add_option("--driver", fit_f.driver, "bm or mafbm")->capture_default_str()->check(CLI::IsMember({"bm", "mafbm"}));
  fit->add_option("--hurst", fit_f.cfg.hurst, "Hurst index (mafbm)")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  fit->add_option("--k", fit_f.cfg.k_factors, "number of OU factors")->capture_default_str()->check(CLI::Range(1, 64));
  fit->add_option("--fit-steps", fit_f.cfg.fit_steps, "optimizer steps")->capture_default_str()->check(CLI::NonNegativeNumber);

  Common train_c;
  TrainFlags train_f;
  train_f.out = "runs/train";
  auto* train_cmd = app.add_subcommand("train", "train one variant");
  add_data_flags(train_cmd, train_c, false);
  add_train_flags(train_cmd, train_f, true);
  train_cmd->add_option("--out", train_f.out, "output directory")->capture_default_str();

  Common cmp_c;
  TrainFlags cmp_f;
  cmp_f.out = "runs/compare";
  auto* cmp = app.add_subcommand("compare", "train all three variants");
  add_data_flags(cmp, cmp_c, false);
  add_train_flags(cmp, cmp_f, false);
  cmp->add_option("--eval-paths", cmp_f.cfg.eval_paths, "paths for the final shared-seed evaluation")
      ->capture_default_str()
      ->check(CLI::Range(2, 1 << 30));
  cmp->add_option("--out", cmp_f.out, "output directory")->capture_default_str();

  Common eval_c;
  SampleFlags eval_f;
  auto* eval_cmd = app.add_subcommand("eval", "ELBO of a checkpoint");
  add_data_flags(eval_cmd, eval_c, false);
  add_sample_flags(eval_cmd, eval_f, 1024);

  Common sim_c;
  SampleFlags sim_f;
  auto* sim_cmd = app.add_subcommand("simulate", "sample controlled paths from a checkpoint");
  add_data_flags(sim_cmd, sim_c, false);
  add_sample_flags(sim_cmd, sim_f, 16);
  sim_cmd->add_option("--out", sim_f.out, "CSV of sampled paths")->required();

  std::string replay_file;
  auto* replay = app.add_subcommand("replay", "re-run the invocation recorded in a manifest");
  replay->add_option("manifest", replay_file, "run manifest")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << kSynopsis;
    return 1;
  }

  if (replay->parsed()) {
    std::vector<std::string> argv;
    try {
      const json j = json::parse(read_text_file(replay_file));
      argv = j.at("argv").get<std::vector<std::string>>();
    } catch (const std::exception& e) {
      err << "error: cannot replay " << replay_file << ": " << e.what() << "\n";
      return 2;
    }
    if (argv.empty() || argv.front() == "replay") {
      err << "error: " << replay_file << " does not record a replayable command\n";
      return 2;
    }
    return run(argv, out, err);
  }

  try {
    if (ingest->parsed()) {
      const Dataset d = prepare_dataset(ingest_fred_csv(read_text_file(ingest_c.data)), ingest_c.n, ingest_c.sigma_obs);
      save_dataset(d, ingest_out);
      Manifest m{"ingest", {}};
      add_data_manifest(m, ingest_c);
      m.add("out", ingest_out);
      write_manifest(m, manifest_path(ingest_c, ingest_out + ".run.json"));
      out << "wrote " << d.obs.size() << " records to " << ingest_out << " (mean " << fmt9(d.norm_mean) << ", sd "
          << fmt9(d.norm_sd) << ")\n";
    } else if (fit->parsed()) {
      const Dataset d = load_any_dataset(fit_c.data, fit_c.n, fit_c.sigma_obs);
      fit_f.cfg.driver = parse_driver(fit_f.driver);
      const Stage1Result s = stage1_fit(d, fit_f.cfg);
      Manifest m{"fit-linear", {}};
      add_data_manifest(m, fit_c);
      m.add("driver", fit_f.driver);
      m.add("hurst", fit_f.cfg.hurst);
      m.add("k", fit_f.cfg.k_factors);
      m.add("fit-steps", fit_f.cfg.fit_steps);
      write_manifest(m, manifest_path(fit_c, "run.json"));
      print_params(out, s);
    } else if (train_cmd->parsed()) {
      const Dataset d = load_any_dataset(train_c.data, train_c.n, train_c.sigma_obs);
      TrainConfig cfg = train_f.cfg;
      cfg.variant = parse_variant(train_f.variant);
      cfg.driver = parse_driver(train_f.driver);
      const fs::path dir(train_f.out);
      Manifest m{"train", {}};
      add_data_manifest(m, train_c);
      add_train_manifest(m, train_f, true);
      m.add("out", train_f.out);
      write_manifest(m, manifest_path(train_c, (dir / "run.json").string()));
      const Stage1Result s = stage1_fit(d, cfg);
      print_params(out, s);
      try {
        const TrainResult r = train(initial_model(s, cfg, cfg.variant), d, cfg);
        write_text_file(dir / "loss.csv", loss_csv(r.records));
        save_checkpoint({r.model, d.norm_mean, d.norm_sd}, dir / "checkpoint.json");
        out << "first loss " << fmt9(r.records.front().neg_elbo) << ", last loss " << fmt9(r.records.back().neg_elbo)
            << "\n";
      } catch (const TrainingError& e) {
        write_text_file(dir / "loss.csv", loss_csv(e.records()));
        save_checkpoint({e.last_good(), d.norm_mean, d.norm_sd}, dir / "checkpoint.json");
        throw;
      }
      out << "wrote " << (dir / "loss.csv").string() << " and " << (dir / "checkpoint.json").string() << "\n";
    } else if (cmp->parsed()) {
      const Dataset d = load_any_dataset(cmp_c.data, cmp_c.n, cmp_c.sigma_obs);
      TrainConfig cfg = cmp_f.cfg;
      cfg.driver = parse_driver(cmp_f.driver);
      const fs::path dir(cmp_f.out);
      Manifest m{"compare", {}};
      add_data_manifest(m, cmp_c);
      add_train_manifest(m, cmp_f, false);
      m.add("eval-paths", cfg.eval_paths);
      m.add("out", cmp_f.out);
      write_manifest(m, manifest_path(cmp_c, (dir / "run.json").string()));
      const CompareResult r = compare_variants(d, cfg);
      print_params(out, r.stage1);
      std::vector<PlotSeries> series;
      for (const VariantRun& v : r.runs) {
        const std::string name = to_string(v.variant);
        write_text_file(dir / ("loss_" + name + ".csv"), loss_csv(v.result.records));
        save_checkpoint({v.result.model, d.norm_mean, d.norm_sd}, dir / ("checkpoint_" + name + ".json"));
        series.push_back({name, v.result.records});
        out << name << ": first loss " << fmt9(v.result.records.front().neg_elbo) << ", final eval "
            << fmt9(-v.final_eval.value) << " +- " << fmt9(v.final_eval.std_error) << "\n";
      }
      write_text_file(dir / "compare.svg", loss_svg(series, "training loss, " + cmp_f.driver + " driver"));
      write_summary(dir / "summary.json", r);
      out << "wrote " << dir.string() << "\n";
    } else if (eval_cmd->parsed()) {
      const Dataset d = load_any_dataset(eval_c.data, eval_c.n, eval_c.sigma_obs);
      const Checkpoint ck = load_checkpoint(eval_f.checkpoint);
      SimConfig sc{eval_f.dt_max, eval_f.paths, eval_f.seed, d.horizon, eval_f.threads, eval_f.block_paths};
      const ElboEstimate e = elbo(ck.model, d.obs, sc);
      Manifest m{"eval", {}};
      add_data_manifest(m, eval_c);
      add_sample_manifest(m, eval_f);
      write_manifest(m, manifest_path(eval_c, "run.json"));
      out << "elbo=" << fmt9(e.value) << " std_error=" << fmt9(e.std_error) << " loglik_term=" << fmt9(e.loglik_term)
          << " energy_term=" << fmt9(e.energy_term) << "\n";
    } else if (sim_cmd->parsed()) {
      const Dataset d = load_any_dataset(sim_c.data, sim_c.n, sim_c.sigma_obs);
      const Checkpoint ck = load_checkpoint(sim_f.checkpoint);
      SimConfig sc{sim_f.dt_max, sim_f.paths, sim_f.seed, d.horizon, sim_f.threads, sim_f.block_paths};
      const PathBatch b = simulate(ck.model, d.obs, sc);
      std::ostringstream csv;
      csv << "t";
      for (int p = 0; p < sim_f.paths; ++p) csv << ",path_" << p;
      csv << "\n";
      for (std::size_t n = 0; n < b.grid.size(); ++n) {
        csv << fmt9(b.grid[n]);
        for (int p = 0; p < sim_f.paths; ++p) {
          csv << "," << fmt9(ck.norm_mean + ck.norm_sd * b.states[0](p, static_cast<Eigen::Index>(n)));
        }
        csv << "\n";
      }
      write_text_file(sim_f.out, csv.str());
      Manifest m{"simulate", {}};
      add_data_manifest(m, sim_c);
      add_sample_manifest(m, sim_f);
      m.add("out", sim_f.out);
      write_manifest(m, manifest_path(sim_c, sim_f.out + ".run.json"));
      out << "wrote " << sim_f.paths << " paths on " << b.grid.size() << " grid points to " << sim_f.out << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace sdevi::cli
