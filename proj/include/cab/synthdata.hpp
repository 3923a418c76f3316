#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cab/matrix.hpp"
#include "cab/xcorr.hpp"

namespace cab {

enum class Task { imputation, anomaly, classification };

std::string_view task_name(Task task);
// Throws ConfigError on an unknown name.
Task parse_task(std::string_view name);

// Feature `target` receives feature `source` circularly delayed by `lag`.
struct PlantedLag {
  std::size_t source = 0;
  std::size_t target = 1;
  std::size_t lag = 1;
  double weight = 1.0;

  bool operator==(const PlantedLag&) const = default;
};

// "i:j:L@w", comma-separated for lists. Throws ConfigError on malformed text.
PlantedLag parse_planted_lag(std::string_view text);
std::vector<PlantedLag> parse_planted_lags(std::string_view text);
std::string format_planted_lags(const std::vector<PlantedLag>& lags);

struct SeriesSample {
  Matrix values;                    // T×d, the complete series
  std::optional<Matrix> mask;       // T×d, 1 = observed, 0 = hidden
  std::optional<int> label;         // class index
  std::optional<std::vector<int>> anomaly_flags;  // length T
  std::vector<PlantedLag> planted_lags;

  bool operator==(const SeriesSample&) const = default;
};

struct Dataset {
  Task task = Task::imputation;
  std::vector<SeriesSample> samples;

  bool operator==(const Dataset&) const = default;
};

struct DatasetSpec {
  Task task = Task::imputation;
  std::size_t length = 96;
  std::size_t features = 8;
  std::size_t samples = 100;
  double mask_ratio = 0.25;
  std::vector<PlantedLag> lags;
  // Observation noise standard deviation relative to each feature's own
  // standard deviation; 1/sqrt(10) gives SNR 10.
  double noise = 0.0;
  std::uint64_t seed = 0;
  double train_ratio = 0.6;
  double val_ratio = 0.2;
  double test_ratio = 0.2;
  std::size_t anomalies_per_sample = 5;
  double anomaly_magnitude = 6.0;
  double ar_coefficient = 0.8;
  double seasonal_amplitude = 0.5;
};

// Throws ConfigError for inconsistent specs (lag >= T, bad feature index,
// ratios that do not sum to 1, mask ratio outside (0, 1), ...).
void validate_spec(const DatasetSpec& spec);

// Base features are independent AR(1) plus sinusoid processes. Each planted
// lag, applied in list order, replaces the target with
// (1 - w)·target + w·roll(source, L). Observation noise is added last.
// Imputation samples are masked, anomaly samples get injected spikes, and
// classification samples of class y carry only the planted lag y.
Dataset gen_lagged_series(const DatasetSpec& spec);

// Hides exactly round(ratio·T·d) uniformly chosen entries.
SeriesSample apply_mask(SeriesSample sample, double ratio, std::uint64_t seed);

// Adds ±magnitude·σ_j spikes at `count` distinct time steps, each on one
// random feature j, and flags those steps.
SeriesSample inject_anomalies(SeriesSample sample, std::size_t count, double magnitude,
                              std::uint64_t seed);

struct DatasetSplits {
  Dataset train, val, test;
};

// Contiguous split: the first round(train_ratio·n) samples train, the next
// round(val_ratio·n) validate, the rest test.
DatasetSplits split_dataset(const Dataset& data, double train_ratio, double val_ratio);

// Every sample must share T, d and which optional fields are present.
void write_dataset(const std::filesystem::path& path, const Dataset& data);
// Throws FileError when unreadable and ParseError on malformed content.
Dataset read_dataset(const std::filesystem::path& path);

// `<base>.train`, `<base>.val`, `<base>.test`.
std::filesystem::path split_path(const std::filesystem::path& base, std::string_view split);
void write_splits(const std::filesystem::path& base, const DatasetSplits& splits);
DatasetSplits read_splits(const std::filesystem::path& base);

// Averages the combined lag scores of each sample's column-normalized values
// (Q̂ = K̂) and selects the TopK lags of the average.
LagSelection recover_lags(const std::vector<SeriesSample>& samples, double lambda, int c,
                          LagPath path = LagPath::fft);

}  // namespace cab
