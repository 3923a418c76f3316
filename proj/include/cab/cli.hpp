#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "cab/model.hpp"
#include "cab/synthdata.hpp"
#include "cab/train.hpp"
#include "json.hpp"

namespace cab::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kFileError = 3,
  kNumericalError = 4,
};

// Ablation presets. `baseline` leaves the configuration untouched.
//   pure    every head correlated, β = 0, lag filtering disabled
//   static  λ = β = 1/2, neither learnable
//   lambda  λ learnable (soft-score weighting), β fixed at 1/2
//   beta    β learnable, λ fixed at 1/2
enum class Ablation { baseline, pure, static_mix, lambda_only, beta_only };

std::string_view ablation_name(Ablation a);
// Accepts none|baseline|pure|static|lambda|beta.
Ablation parse_ablation(std::string_view name);
const std::vector<Ablation>& all_ablations();
ModelConfig apply_ablation(ModelConfig cfg, Ablation a);

struct RunConfig {
  ModelConfig model;
  TrainOptions train;
  std::string data;  // dataset base path
  Ablation ablation = Ablation::baseline;
  double anomaly_quantile = 0.95;
};

// FNV-1a 64 over the canonical key=value listing of the run, as 16 hex digits.
std::string config_hash(const RunConfig& run);
std::string run_id(const RunConfig& run);

// key = value lines (blank lines and # comments skipped) turned into
// "--key=value" arguments; underscores in keys become dashes.
std::vector<std::string> read_config_args(const std::filesystem::path& path);

struct TrainOutcome {
  std::string run_id;
  std::string config_hash;
  TrainResult train;
  Metrics test;
  ModelParams params;
};

using RecordSink = std::function<void(const nlohmann::json&)>;

// Trains on splits.train/val, evaluates on splits.test, and reports one
// record per epoch plus a summary record through `emit`.
TrainOutcome run_training(const RunConfig& run, const DatasetSplits& splits, const RecordSink& emit);

nlohmann::json metrics_record(const Metrics& m);

struct BenchRow {
  std::size_t t_len = 0;
  std::size_t d_k = 0;
  double naive_seconds = 0.0;
  double fft_seconds = 0.0;
  double cab_seconds = 0.0;  // full correlated attention forward, FFT path
};

struct BenchOptions {
  std::vector<std::size_t> lengths{384, 768, 1536};
  std::vector<std::size_t> widths{8};
  int repetitions = 10;
  int warmup = 3;
  int threads = 1;
  std::uint64_t seed = 0;
};

// Median wall-clock seconds per (T, d_k) after warmup runs.
std::vector<BenchRow> run_bench(const BenchOptions& options);
// Comma-separated table with T→2T time ratios against the previous row of
// the same d_k.
std::string bench_csv(const std::vector<BenchRow>& rows);

// Entry point for the command-line tool.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cab::cli
