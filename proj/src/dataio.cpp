#include "sdevi/dataio.hpp"

#include "sdevi/errors.hpp"
#include "sdevi/random.hpp"
#include "sdevi/tape.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sdevi {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string line_tag(std::size_t line) { return "line " + std::to_string(line) + ": "; }

int parse_int(std::string_view s) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return -1;
  return v;
}

bool valid_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  const int y = parse_int(s.substr(0, 4));
  const int m = parse_int(s.substr(5, 2));
  const int d = parse_int(s.substr(8, 2));
  if (y < 0 || m < 0 || d < 0) return false;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                        std::chrono::day{static_cast<unsigned>(d)}};
  return ymd.ok();
}

bool parse_double(std::string_view s, double& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

std::size_t RawSeries::present_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < size(); ++i) n += missing(i) ? 0 : 1;
  return n;
}

RawSeries ingest_fred_csv(std::string_view text) {
  RawSeries out;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const std::size_t comma = line.find(',');
    if (!header_seen) {
      const std::string_view first = comma == std::string_view::npos ? line : trim(line.substr(0, comma));
      if (comma == std::string_view::npos || (first != "DATE" && first != "observation_date")) {
        throw DataError(line_tag(line_no) + "expected header 'DATE,<series>'");
      }
      if (line.find(',', comma + 1) != std::string_view::npos) {
        throw DataError(line_tag(line_no) + "expected exactly two columns");
      }
      header_seen = true;
      continue;
    }
    if (comma == std::string_view::npos || line.find(',', comma + 1) != std::string_view::npos) {
      throw DataError(line_tag(line_no) + "expected two comma-separated fields");
    }
    const std::string_view date = trim(line.substr(0, comma));
    const std::string_view value = trim(line.substr(comma + 1));
    if (!valid_date(date)) throw DataError(line_tag(line_no) + "unparseable date '" + std::string(date) + "'");
    if (!out.dates.empty() && !(std::string(date) > out.dates.back())) {
      throw DataError(line_tag(line_no) + "date " + std::string(date) + " is not after " + out.dates.back());
    }
    double v = 0.0;
    if (value != kMissingMarker && !parse_double(value, v)) {
      throw DataError(line_tag(line_no) + "non-numeric value '" + std::string(value) + "'");
    }
    out.dates.emplace_back(date);
    out.raw_values.emplace_back(value);
  }
  if (!header_seen) throw DataError("line 1: expected header 'DATE,<series>'");
  return out;
}

Dataset prepare_values(std::span<const double> values, int n, double sigma_obs) {
  if (n < 2) throw PreconditionError("prepare_dataset: n must be >= 2");
  if (!(sigma_obs > 0.0)) throw PreconditionError("prepare_dataset: sigma_obs must be positive");
  if (values.size() < static_cast<std::size_t>(n)) {
    throw DataError("insufficient data: " + std::to_string(values.size()) + " present records, need " +
                    std::to_string(n));
  }
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += values[static_cast<std::size_t>(i)];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = values[static_cast<std::size_t>(i)] - mean;
    var += d * d;
  }
  const double sd = std::sqrt(var / n);
  if (!(sd > 0.0)) throw DataError("cannot standardize: values have zero standard deviation");
  Dataset data;
  data.norm_mean = mean;
  data.norm_sd = sd;
  data.horizon = 1.0;
  data.obs.noise_var = sigma_obs * sigma_obs;
  data.obs.times.resize(static_cast<std::size_t>(n));
  data.obs.values.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    data.obs.times[static_cast<std::size_t>(i)] = static_cast<double>(i) / static_cast<double>(n - 1);
    data.obs.values[static_cast<std::size_t>(i)] = (values[static_cast<std::size_t>(i)] - mean) / sd;
  }
  data.obs.times.back() = 1.0;
  return data;
}

Dataset prepare_dataset(const RawSeries& raw, int n, double sigma_obs) {
  std::vector<double> present;
  for (std::size_t i = 0; i < raw.size() && present.size() < static_cast<std::size_t>(std::max(n, 0)); ++i) {
    if (raw.missing(i)) continue;
    double v = 0.0;
    if (!parse_double(raw.raw_values[i], v)) throw DataError("record " + raw.dates[i] + " is not numeric");
    present.push_back(v);
  }
  return prepare_values(present, n, sigma_obs);
}

ObservationSet synth_ou(const LinearSDEParams& params, std::span<const double> times, std::uint64_t seed,
                        double sigma_obs) {
  params.validate();
  if (!(sigma_obs >= 0.0)) throw PreconditionError("synth_ou: sigma_obs must be >= 0");
  ObservationSet obs;
  obs.noise_var = sigma_obs * sigma_obs;
  double x = params.x0;
  double t_prev = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double dt = times[i] - t_prev;
    if (!(dt >= 0.0) || (i > 0 && !(dt > 0.0))) throw PreconditionError("synth_ou: times must be increasing and >= 0");
    const double z = params.lambda * dt;
    const double mean = x * std::exp(-z) + params.eta * dt * ad::phi1_value(z);
    const double var = params.varsigma * params.varsigma * dt * ad::phi1_value(2.0 * z);
    x = mean + std::sqrt(var) * rng::normal(seed, 0, i);
    obs.times.push_back(times[i]);
    obs.values.push_back(x + sigma_obs * rng::normal(seed, 1, i));
    t_prev = times[i];
  }
  return obs;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "sdevi-dataset";
  j["version"] = 1;
  j["horizon"] = data.horizon;
  j["norm_mean"] = data.norm_mean;
  j["norm_sd"] = data.norm_sd;
  j["noise_var"] = data.obs.noise_var;
  j["times"] = data.obs.times;
  j["values"] = data.obs.values;
  write_text_file(path, j.dump(1) + "\n");
}

Dataset load_dataset_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("format", std::string()) != "sdevi-dataset") throw DataError(path.string() + ": not a dataset file");
    if (j.at("version").get<int>() != 1) {
      throw DataError(path.string() + ": unsupported dataset version " + j.at("version").dump());
    }
    Dataset d;
    d.horizon = j.at("horizon").get<double>();
    d.norm_mean = j.at("norm_mean").get<double>();
    d.norm_sd = j.at("norm_sd").get<double>();
    d.obs.noise_var = j.at("noise_var").get<double>();
    d.obs.times = j.at("times").get<std::vector<double>>();
    d.obs.values = j.at("values").get<std::vector<double>>();
    d.obs.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed dataset file (" + e.what() + ")");
  } catch (const PreconditionError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Dataset load_any_dataset(const std::filesystem::path& path, int n, double sigma_obs) {
  if (path.extension() == ".csv") return prepare_dataset(ingest_fred_csv(read_text_file(path)), n, sigma_obs);
  return load_dataset_file(path);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace sdevi
