#pragma once

// Two-stage training: closed-form fit of the linear prior, then stochastic
// gradient ascent on the Monte Carlo ELBO.

#include "sdevi/dataio.hpp"
#include "sdevi/sdesim.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace sdevi {

struct TrainConfig {
  Variant variant = Variant::kHybrid;
  Driver driver = Driver::kBm;
  int iterations = 2000;
  double learn_rate = 1e-3;
  int n_paths = 32;
  double dt_max = 1e-3;  // absolute; the default dataset horizon is 1
  std::uint64_t seed = 0;
  double hurst = 0.65;
  int k_factors = 5;
  double gamma_ratio = 10.0;
  int log_every = 1;
  int threads = 0;
  int block_paths = 32;
  double grad_clip = 10.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int fit_steps = 2000;
  double fit_step_size = 1e-2;
  int eval_paths = 256;  // final common-seed evaluation in compare_variants
  bool wall_time = false;
  Eigen::Index hidden = kHiddenWidth;

  void validate() const;
};

struct LossRecord {
  int iteration = 0;
  double neg_elbo = 0.0;
  double loglik_term = 0.0;
  double energy_term = 0.0;
  double wall_time_s = 0.0;
};

struct Stage1Result {
  LinearSDEParams params;
  double loglik = 0.0;
  double initial_loglik = 0.0;
  std::optional<MafbmDriver> mafbm;
};

Stage1Result stage1_fit(const Dataset& data, const TrainConfig& config);

/// The model a variant starts from after stage 1.
SdeModel initial_model(const Stage1Result& stage1, const TrainConfig& config, Variant variant);

SimConfig sim_config(const TrainConfig& config, const Dataset& data, std::uint64_t seed, int n_paths);

struct TrainResult {
  SdeModel model;
  std::vector<LossRecord> records;
};

/// Thrown when the loss turns non-finite; carries the last finite model.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, SdeModel last_good, std::vector<LossRecord> records)
      : Error(what), last_good_(std::move(last_good)), records_(std::move(records)) {}
  const SdeModel& last_good() const { return last_good_; }
  const std::vector<LossRecord>& records() const { return records_; }

 private:
  SdeModel last_good_;
  std::vector<LossRecord> records_;
};

using RecordCallback = std::function<void(const LossRecord&)>;

TrainResult train(SdeModel model, const Dataset& data, const TrainConfig& config, const RecordCallback& on_record = {});

struct VariantRun {
  Variant variant = Variant::kLinear;
  TrainResult result;
  ElboEstimate final_eval;  // shared seed across variants
};

struct CompareResult {
  Stage1Result stage1;
  std::array<VariantRun, 3> runs;  // linear, nonlinear, hybrid
  std::uint64_t eval_seed = 0;
};

CompareResult compare_variants(const Dataset& data, const TrainConfig& config);

// Loss logs and plots.
void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& records);
std::string loss_csv(const std::vector<LossRecord>& records);

struct PlotSeries {
  std::string name;
  std::vector<LossRecord> records;
};
/// One polyline per series on a log-scale loss axis. When any loss is <= 0
/// every curve is shifted by the same offset and the axis label says so.
std::string loss_svg(const std::vector<PlotSeries>& series, const std::string& title);

// Checkpoints.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  SdeModel model;
  double norm_mean = 0.0;
  double norm_sd = 1.0;
};

std::string checkpoint_text(const Checkpoint& ckpt);
Checkpoint checkpoint_from_text(const std::string& text);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sdevi
