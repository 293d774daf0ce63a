#pragma once

// FRED-style CSV ingestion, standardization and synthetic OU data.

#include "sdevi/lingauss.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sdevi {

inline constexpr std::string_view kMissingMarker = ".";

struct RawSeries {
  std::vector<std::string> dates;       // YYYY-MM-DD, strictly increasing
  std::vector<std::string> raw_values;  // "." marks a missing value

  std::size_t size() const { return dates.size(); }
  bool missing(std::size_t i) const { return raw_values[i] == kMissingMarker; }
  std::size_t present_count() const;
};

struct Dataset {
  ObservationSet obs;  // standardized values on times i / (n - 1)
  double horizon = 1.0;
  double norm_mean = 0.0;
  double norm_sd = 1.0;

  double denormalize(double v) const { return norm_mean + norm_sd * v; }
};

/// Parses `DATE,<series>` text. Throws DataError naming the line on malformed input.
RawSeries ingest_fred_csv(std::string_view text);

/// First n present records, record-index time on [0, 1], values standardized
/// to mean 0 and (population) sd 1, noise variance sigma_obs^2.
Dataset prepare_dataset(const RawSeries& raw, int n = 500, double sigma_obs = 0.1);
Dataset prepare_values(std::span<const double> values, int n, double sigma_obs);

/// Exact OU transitions from x0 at t = 0 plus N(0, sigma_obs^2) noise.
ObservationSet synth_ou(const LinearSDEParams& params, std::span<const double> times, std::uint64_t seed,
                        double sigma_obs);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset_file(const std::filesystem::path& path);
/// `.csv` files are ingested and prepared with n records; anything else is read as a dataset file.
Dataset load_any_dataset(const std::filesystem::path& path, int n = 500, double sigma_obs = 0.1);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace sdevi
