#include "cab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "cab/attention.hpp"
#include "cab/checkpoint.hpp"
#include "cab/errors.hpp"
#include "cab/numerics.hpp"
#include "cab/xcorr.hpp"
#include "text_io.hpp"

namespace cab::cli {

using nlohmann::json;

std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::baseline: return "baseline";
    case Ablation::pure: return "pure";
    case Ablation::static_mix: return "static";
    case Ablation::lambda_only: return "lambda";
    case Ablation::beta_only: return "beta";
  }
  return "baseline";
}

Ablation parse_ablation(std::string_view name) {
  if (name == "none" || name == "baseline") return Ablation::baseline;
  if (name == "pure") return Ablation::pure;
  if (name == "static") return Ablation::static_mix;
  if (name == "lambda") return Ablation::lambda_only;
  if (name == "beta") return Ablation::beta_only;
  throw ConfigError("unknown ablation '" + std::string(name) +
                    "' (expected none, pure, static, lambda or beta)");
}

const std::vector<Ablation>& all_ablations() {
  static const std::vector<Ablation> all{Ablation::baseline, Ablation::pure, Ablation::static_mix,
                                         Ablation::lambda_only, Ablation::beta_only};
  return all;
}

ModelConfig apply_ablation(ModelConfig cfg, Ablation a) {
  switch (a) {
    case Ablation::baseline:
      break;
    case Ablation::pure:
      cfg.temporal_heads = 0;
      cfg.cab.filtering = false;
      cfg.cab.beta_override = 0.0;
      cfg.learn_beta = false;
      break;
    case Ablation::static_mix:
      cfg.cab.lambda_mode = LambdaMode::fixed;
      cfg.cab.lambda_raw = 0.0;
      cfg.cab.beta_raw = 0.0;
      cfg.cab.beta_override.reset();
      cfg.cab.filtering = true;
      cfg.learn_beta = false;
      break;
    case Ablation::lambda_only:
      cfg.cab.lambda_mode = LambdaMode::learnable;
      cfg.cab.beta_raw = 0.0;
      cfg.cab.beta_override.reset();
      cfg.cab.filtering = true;
      cfg.learn_beta = false;
      break;
    case Ablation::beta_only:
      cfg.cab.lambda_mode = LambdaMode::fixed;
      cfg.cab.lambda_raw = 0.0;
      cfg.cab.beta_override.reset();
      cfg.cab.filtering = true;
      cfg.learn_beta = true;
      break;
  }
  return cfg;
}

std::string config_hash(const RunConfig& run) {
  ConfigEntries entries = model_config_entries(run.model);
  entries.emplace_back("epochs", std::to_string(run.train.epochs));
  entries.emplace_back("patience", std::to_string(run.train.patience));
  entries.emplace_back("batch_size", std::to_string(run.train.batch_size));
  entries.emplace_back("lr", detail::format_double(run.train.lr));
  entries.emplace_back("optimizer", std::string(optimizer_name(run.train.optimizer)));
  entries.emplace_back("seed", std::to_string(run.train.seed));
  entries.emplace_back("data", run.data);
  entries.emplace_back("ablation", std::string(ablation_name(run.ablation)));
  entries.emplace_back("anomaly_quantile", detail::format_double(run.anomaly_quantile));
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [k, v] : entries) {
    for (const char ch : k + '=' + v + '\n') {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string run_id(const RunConfig& run) {
  return std::string(task_name(run.model.task)) + "-" + std::string(ablation_name(run.ablation)) +
         "-" + config_hash(run).substr(0, 12);
}

std::vector<std::string> read_config_args(const std::filesystem::path& path) {
  detail::LineReader r(path);
  std::vector<std::string> args;
  std::string line;
  while (r.next(line)) {
    const std::string_view t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) r.fail("config", "expected key = value, got '" + std::string(t) + "'");
    std::string key(detail::trim(t.substr(0, eq)));
    const std::string value(detail::trim(t.substr(eq + 1)));
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    if (key.empty()) r.fail("config", "empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

json metrics_record(const Metrics& m) {
  json j;
  j["samples"] = m.samples;
  j["loss"] = m.loss;
  switch (m.task) {
    case Task::imputation:
      j["mse"] = m.mse;
      j["mae"] = m.mae;
      break;
    case Task::anomaly:
      j["mse"] = m.mse;
      j["mae"] = m.mae;
      j["precision"] = m.precision;
      j["recall"] = m.recall;
      j["f1"] = m.f1;
      j["threshold"] = m.threshold;
      j["threshold_degenerate"] = m.threshold_degenerate;
      break;
    case Task::classification:
      j["accuracy"] = m.accuracy;
      break;
  }
  return j;
}

namespace {

std::size_t trainable_count(const ParamSet& set) {
  std::size_t n = 0;
  for (const Param& p : set)
    if (p.trainable) n += p.value.size();
  return n;
}

}  // namespace

TrainOutcome run_training(const RunConfig& run, const DatasetSplits& splits, const RecordSink& emit) {
  TrainOutcome outcome{run_id(run), config_hash(run), {}, {}, init_model(run.model, run.train.seed)};
  const auto on_epoch = [&](const EpochStats& e) {
    if (!emit) return;
    emit(json{{"type", "epoch"},
              {"run_id", outcome.run_id},
              {"config_hash", outcome.config_hash},
              {"epoch", e.epoch},
              {"train_loss", e.train_loss},
              {"val_loss", e.val_loss},
              {"seconds_per_iter", e.seconds_per_iter},
              {"iterations", e.iterations}});
  };
  outcome.train = train_model(outcome.params, splits.train, splits.val, run.train, on_epoch);
  outcome.test = evaluate_model(outcome.params, splits.test, splits.val, run.anomaly_quantile);
  if (emit) {
    double spi = 0.0;
    for (const EpochStats& e : outcome.train.history) spi += e.seconds_per_iter;
    spi /= static_cast<double>(std::max<std::size_t>(1, outcome.train.history.size()));
    json j{{"type", "summary"},
           {"run_id", outcome.run_id},
           {"config_hash", outcome.config_hash},
           {"task", task_name(run.model.task)},
           {"model", model_kind_name(run.model.kind)},
           {"ablation", ablation_name(run.ablation)},
           {"heads", run.model.heads},
           {"temporal_heads", run.model.temporal_heads},
           {"parameters", parameter_count(run.model)},
           {"trainable_parameters", trainable_count(outcome.params.set)},
           {"epochs_run", outcome.train.history.size()},
           {"best_epoch", outcome.train.best_epoch},
           {"best_val_loss", outcome.train.best_val_loss},
           {"early_stopped", outcome.train.early_stopped},
           {"seconds_per_iter", spi}};
    j.update(metrics_record(outcome.test));
    emit(j);
  }
  return outcome;
}

std::vector<BenchRow> run_bench(const BenchOptions& options) {
  if (options.repetitions < 1) throw ConfigError("--reps must be at least 1");
  const auto median_seconds = [&](const std::function<void()>& fn) {
    for (int i = 0; i < options.warmup; ++i) fn();
    std::vector<double> times;
    for (int i = 0; i < options.repetitions; ++i) {
      const auto start = std::chrono::steady_clock::now();
      fn();
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  };

  std::vector<BenchRow> rows;
  for (std::size_t d_k : options.widths) {
    for (std::size_t t_len : options.lengths) {
      if (t_len < 2 || d_k < 1) throw ConfigError("bench needs T >= 2 and d_k >= 1");
      std::mt19937_64 rng(options.seed + 1000003 * t_len + d_k);
      std::normal_distribution<double> gauss(0.0, 1.0);
      Matrix q(t_len, d_k), k(t_len, d_k), v(t_len, d_k);
      for (double& x : q.values()) x = gauss(rng);
      for (double& x : k.values()) x = gauss(rng);
      for (double& x : v.values()) x = gauss(rng);
      const Matrix q_hat = l2_normalize_cols(q), k_hat = l2_normalize_cols(k);
      volatile double sink = 0.0;
      BenchRow row{t_len, d_k};
      row.naive_seconds = median_seconds([&] {
        sink = sink + raw_lag_scores(xcorr_all_lags_naive(q_hat, k_hat)).diag[0];
      });
      FftXcorrOptions fo;
      fo.threads = options.threads;
      row.fft_seconds = median_seconds([&] { sink = sink + xcorr_all_lags_fft(q_hat, k_hat, fo).scores.diag[0]; });
      CabOptions co;
      co.threads = options.threads;
      row.cab_seconds = median_seconds([&] { sink = sink + correlated_attention(q, k, v, CabParams{}, co).values()[0]; });
      rows.push_back(row);
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "T,d_k,naive_seconds,fft_seconds,cab_forward_seconds,naive_ratio,fft_ratio\n";
  os << std::setprecision(6);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const BenchRow& r = rows[i];
    os << r.t_len << ',' << r.d_k << ',' << r.naive_seconds << ',' << r.fft_seconds << ','
       << r.cab_seconds << ',';
    if (i > 0 && rows[i - 1].d_k == r.d_k && rows[i - 1].t_len * 2 == r.t_len)
      os << r.naive_seconds / rows[i - 1].naive_seconds << ',' << r.fft_seconds / rows[i - 1].fft_seconds;
    else
      os << ',';
    os << '\n';
  }
  return os.str();
}

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

struct GenFlags {
  std::string task;
  std::size_t t_len = 96;
  std::size_t d = 8;
  std::size_t samples = 100;
  double mask_ratio = 0.25;
  std::string lags;
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t anomalies = 5;
  double anomaly_magnitude = 6.0;
};

struct TrainFlags {
  std::string data;
  std::string model = "transformer";
  std::string cab = "on";
  std::string ablation = "none";
  std::size_t heads = 16;
  std::size_t temporal_heads = 8;
  std::size_t d_model = 64;
  std::size_t d_k = 0;
  std::size_t blocks = 2;
  std::size_t d_ff = 0;
  int c = 1;
  double lr = 1e-3;
  std::size_t batch_size = 0;
  std::size_t epochs = 30;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::string lag_path = "fft";
  int threads = 1;
  std::string optimizer = "adam";
  std::string positional = "off";
  std::string learn_lambda = "auto";
  std::string learn_beta = "on";
  std::string learn_tau = "on";
  double anomaly_quantile = 0.95;
  std::string metrics;
  std::string checkpoint;
};

struct EvalFlags {
  std::string checkpoint;
  std::string data;
  double anomaly_quantile = 0.95;
  std::string metrics;
};

struct BenchFlags {
  std::vector<std::size_t> lengths{384, 768, 1536};
  std::vector<std::size_t> widths{8};
  int reps = 10;
  int warmup = 3;
  int threads = 1;
  std::uint64_t seed = 0;
  std::string out;
};

const std::vector<std::string> kOnOff{"on", "off"};

void add_config_option(CLI::App* app, std::string& path) {
  app->add_option("--config", path, "File of key = value lines; flags on the command line win");
}

void add_out_dir(CLI::App* app, std::string& dir) {
  app->add_option("--out-dir", dir, "Directory for outputs")
      ->envname("CAB_OUT_DIR")
      ->default_val(".");
}

void add_train_flags(CLI::App* app, TrainFlags& f, bool with_ablation) {
  app->add_option("--data", f.data, "Dataset base path (reads <base>.train/.val/.test)")->required();
  app->add_option("--model", f.model, "Base model")->check(CLI::IsMember({"transformer", "nonstationary"}))->capture_default_str();
  app->add_option("--cab", f.cab, "on: mixture of temporal and correlated heads; off: temporal heads only")
      ->check(CLI::IsMember(kOnOff))->capture_default_str();
  if (with_ablation)
    app->add_option("--ablation", f.ablation, "Ablation preset")
        ->check(CLI::IsMember({"none", "pure", "static", "lambda", "beta"}))->capture_default_str();
  app->add_option("--heads", f.heads, "Total heads h")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--temporal-heads", f.temporal_heads, "Temporal heads m")->capture_default_str();
  app->add_option("--d-model", f.d_model, "Embedding width")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--d-k", f.d_k, "Per-head width (0: d_model / h)")->capture_default_str();
  app->add_option("--blocks", f.blocks, "Encoder blocks")->capture_default_str();
  app->add_option("--d-ff", f.d_ff, "Feed-forward width (0: 4·d_model)")->capture_default_str();
  app->add_option("--c", f.c, "Lag multiplier: k = c·ceil(ln T)")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--lr", f.lr, "Learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--batch-size", f.batch_size, "Batch size (0: 16, or 128 for anomaly)")->capture_default_str();
  app->add_option("--epochs", f.epochs, "Maximum epochs")->capture_default_str();
  app->add_option("--patience", f.patience, "Epochs without validation improvement before stopping")->capture_default_str();
  app->add_option("--seed", f.seed, "Initialization and shuffling seed")->capture_default_str();
  app->add_option("--lag-path", f.lag_path, "Lag scoring path")->check(CLI::IsMember({"fft", "naive"}))->capture_default_str();
  app->add_option("--threads", f.threads, "Worker threads inside lag scoring")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--optimizer", f.optimizer, "Optimizer")->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
  app->add_option("--positional-encoding", f.positional, "Sinusoidal positional encoding")->check(CLI::IsMember(kOnOff))->capture_default_str();
  app->add_option("--learn-lambda", f.learn_lambda, "auto: learnable only when d_k >= 100")
      ->check(CLI::IsMember({"auto", "on", "off"}))->capture_default_str();
  app->add_option("--learn-beta", f.learn_beta, "Whether beta is learnable")->check(CLI::IsMember(kOnOff))->capture_default_str();
  app->add_option("--learn-tau", f.learn_tau, "Whether tau is learnable")->check(CLI::IsMember(kOnOff))->capture_default_str();
  app->add_option("--anomaly-quantile", f.anomaly_quantile, "Validation-error quantile used as the anomaly threshold")
      ->check(CLI::Range(0.0, 1.0))->capture_default_str();
  app->add_option("--metrics", f.metrics, "NDJSON metrics file (default <out-dir>/metrics.ndjson)");
}

std::filesystem::path resolve_in(const std::string& dir, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute() || dir.empty()) return p;
  return std::filesystem::path(dir) / p;
}

// A relative dataset base is looked up as given first, then under the output
// directory.
std::filesystem::path resolve_data(const std::string& dir, const std::string& base) {
  const std::filesystem::path given(base);
  if (std::filesystem::exists(split_path(given, "train")) || given.is_absolute()) return given;
  const auto under = resolve_in(dir, base);
  if (std::filesystem::exists(split_path(under, "train"))) return under;
  return given;
}

RunConfig build_run(const TrainFlags& f, const DatasetSplits& splits) {
  if (splits.train.samples.empty()) throw UsageError("--data: training split is empty");
  RunConfig run;
  ModelConfig& m = run.model;
  m.task = splits.train.task;
  m.kind = parse_model_kind(f.model);
  m.seq_len = splits.train.samples.front().values.rows();
  m.d_in = splits.train.samples.front().values.cols();
  m.d_model = f.d_model;
  m.heads = f.heads;
  m.temporal_heads = f.temporal_heads;
  m.d_k = f.d_k;
  m.blocks = f.blocks;
  m.d_ff = f.d_ff;
  if (m.task == Task::classification) {
    int max_label = -1;
    for (const Dataset* d : {&splits.train, &splits.val, &splits.test})
      for (const SeriesSample& s : d->samples) max_label = std::max(max_label, s.label.value_or(-1));
    m.num_classes = static_cast<std::size_t>(std::max(max_label + 1, 2));
  }
  m.positional_encoding = f.positional == "on";
  m.cab.c = f.c;
  m.lag_path = f.lag_path == "fft" ? LagPath::fft : LagPath::naive;
  m.threads = f.threads;
  m.learn_beta = f.learn_beta == "on";
  m.learn_tau = f.learn_tau == "on";
  if (m.temporal_heads > m.heads)
    throw UsageError("--temporal-heads " + std::to_string(m.temporal_heads) + " exceeds --heads " +
                     std::to_string(m.heads));
  if (f.d_k == 0 && m.d_model % m.heads != 0)
    throw UsageError("--d-model " + std::to_string(m.d_model) + " is not divisible by --heads " +
                     std::to_string(m.heads) + "; pass --d-k");
  m.cab.lambda_mode = f.learn_lambda == "auto"  ? default_lambda_mode(m.head_dim())
                      : f.learn_lambda == "on" ? LambdaMode::learnable
                                               : LambdaMode::fixed;
  run.ablation = parse_ablation(f.ablation);
  if (f.cab == "off") {
    if (run.ablation != Ablation::baseline) throw UsageError("--ablation requires --cab on");
    m.temporal_heads = m.heads;
  }
  m = apply_ablation(m, run.ablation);

  run.train.epochs = f.epochs;
  run.train.patience = f.patience;
  run.train.batch_size = f.batch_size ? f.batch_size : (m.task == Task::anomaly ? 128 : 16);
  run.train.lr = f.lr;
  run.train.optimizer = parse_optimizer(f.optimizer);
  run.train.seed = f.seed;
  run.data = f.data;
  run.anomaly_quantile = f.anomaly_quantile;
  if (!(f.anomaly_quantile > 0.0 && f.anomaly_quantile < 1.0))
    throw UsageError("--anomaly-quantile must lie strictly between 0 and 1");
  validate_config(m);
  return run;
}

class MetricsWriter {
 public:
  MetricsWriter(std::ostream& console, const std::filesystem::path& path, bool echo)
      : console_(console), echo_(echo) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    file_.open(path, std::ios::app);
    if (!file_) throw FileError("cannot open metrics file '" + path.string() + "'");
  }

  void operator()(const json& record) {
    const std::string line = record.dump();
    file_ << line << '\n';
    file_.flush();
    if (echo_) console_ << line << '\n';
  }

 private:
  std::ostream& console_;
  std::ofstream file_;
  bool echo_;
};

int cmd_gen_data(const GenFlags& f, const std::string& out_dir, std::ostream& out) {
  DatasetSpec spec;
  spec.task = parse_task(f.task);
  spec.length = f.t_len;
  spec.features = f.d;
  spec.samples = f.samples;
  spec.mask_ratio = f.mask_ratio;
  try {
    spec.lags = parse_planted_lags(f.lags);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("--lags: ") + e.what());
  }
  for (const PlantedLag& pl : spec.lags) {
    if (pl.lag < 1 || pl.lag >= spec.length)
      throw UsageError("--lags: lag " + std::to_string(pl.lag) + " must lie in [1, --t - 1] = [1, " +
                       std::to_string(spec.length - 1) + "]");
    if (pl.source >= spec.features || pl.target >= spec.features)
      throw UsageError("--lags: feature index outside [0, --d - 1] = [0, " + std::to_string(spec.features - 1) + "]");
  }
  if (spec.task == Task::classification && spec.lags.size() < 2)
    throw UsageError("--lags: classification needs at least two planted lags, one per class");
  if (spec.task == Task::anomaly && f.anomalies >= f.t_len)
    throw UsageError("--anomalies must be below --t");
  spec.noise = f.noise;
  spec.seed = f.seed;
  spec.anomalies_per_sample = f.anomalies;
  spec.anomaly_magnitude = f.anomaly_magnitude;
  validate_spec(spec);

  const auto base = resolve_in(out_dir, f.out);
  const DatasetSplits splits = split_dataset(gen_lagged_series(spec), spec.train_ratio, spec.val_ratio);
  write_splits(base, splits);
  json j{{"type", "dataset"},
         {"task", task_name(spec.task)},
         {"train", split_path(base, "train").string()},
         {"val", split_path(base, "val").string()},
         {"test", split_path(base, "test").string()},
         {"samples", {{"train", splits.train.samples.size()},
                      {"val", splits.val.samples.size()},
                      {"test", splits.test.samples.size()}}},
         {"lags", format_planted_lags(spec.lags)}};
  if (spec.task == Task::imputation)
    j["hidden_per_sample"] = std::llround(spec.mask_ratio * static_cast<double>(spec.length * spec.features));
  out << j.dump() << '\n';
  return kOk;
}

int cmd_train(const TrainFlags& f, const std::string& out_dir, std::ostream& out) {
  const DatasetSplits splits = read_splits(resolve_data(out_dir, f.data));
  const RunConfig run = build_run(f, splits);
  const std::string id = run_id(run);
  MetricsWriter writer(out, f.metrics.empty() ? resolve_in(out_dir, "metrics.ndjson") : resolve_in(out_dir, f.metrics), true);
  try {
    const TrainOutcome outcome = run_training(run, splits, std::ref(writer));
    const auto ckpt = f.checkpoint.empty() ? resolve_in(out_dir, id + ".ckpt") : resolve_in(out_dir, f.checkpoint);
    save_checkpoint(ckpt, outcome.params);
  } catch (const NumericalError& e) {
    writer(json{{"type", "error"}, {"run_id", id}, {"config_hash", config_hash(run)},
                {"kind", "numerical"}, {"message", e.what()}});
    throw;
  }
  return kOk;
}

int cmd_eval(const EvalFlags& f, const std::string& out_dir, std::ostream& out) {
  const ModelParams params = load_checkpoint(resolve_in(out_dir, f.checkpoint));
  const DatasetSplits splits = read_splits(resolve_data(out_dir, f.data));
  if (splits.test.task != params.config.task)
    throw UsageError("--data holds a " + std::string(task_name(splits.test.task)) +
                     " dataset but the checkpoint was trained for " + std::string(task_name(params.config.task)));
  if (!(f.anomaly_quantile > 0.0 && f.anomaly_quantile < 1.0))
    throw UsageError("--anomaly-quantile must lie strictly between 0 and 1");
  const Metrics m = evaluate_model(params, splits.test, splits.val, f.anomaly_quantile);
  json j{{"type", "eval"},
         {"checkpoint", f.checkpoint},
         {"data", f.data},
         {"task", task_name(params.config.task)},
         {"parameters", parameter_count(params.config)}};
  j.update(metrics_record(m));
  if (!f.metrics.empty()) {
    MetricsWriter writer(out, resolve_in(out_dir, f.metrics), false);
    writer(j);
  }
  out << j.dump() << '\n';
  return kOk;
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int cmd_ablate(const TrainFlags& f, const std::string& out_dir, std::ostream& out) {
  if (f.cab == "off") throw UsageError("--cab off leaves no correlated heads to ablate");
  const DatasetSplits splits = read_splits(resolve_data(out_dir, f.data));
  MetricsWriter writer(out, f.metrics.empty() ? resolve_in(out_dir, "metrics.ndjson") : resolve_in(out_dir, f.metrics), false);

  struct Row {
    Ablation preset;
    RunConfig run;
    Metrics test;
    std::size_t epochs = 0;
    std::size_t trainable = 0;
  };
  std::vector<Row> rows;
  for (Ablation a : all_ablations()) {
    TrainFlags pf = f;
    pf.ablation = std::string(ablation_name(a));
    const RunConfig run = build_run(pf, splits);
    try {
      const TrainOutcome outcome = run_training(run, splits, std::ref(writer));
      save_checkpoint(resolve_in(out_dir, outcome.run_id + ".ckpt"), outcome.params);
      rows.push_back({a, run, outcome.test, outcome.train.history.size(), trainable_count(outcome.params.set)});
    } catch (const NumericalError& e) {
      writer(json{{"type", "error"}, {"run_id", run_id(run)}, {"config_hash", config_hash(run)},
                  {"kind", "numerical"}, {"message", e.what()}});
      throw;
    }
  }

  const Task task = splits.train.task;
  std::vector<std::string> metric_names;
  if (task == Task::imputation) metric_names = {"mse", "mae"};
  if (task == Task::anomaly) metric_names = {"precision", "recall", "f1"};
  if (task == Task::classification) metric_names = {"accuracy"};
  out << std::left << std::setw(10) << "preset" << std::setw(4) << "m" << std::setw(11) << "lambda"
      << std::setw(11) << "beta" << std::setw(11) << "filtering" << std::setw(11) << "trainable"
      << std::setw(8) << "epochs";
  for (const auto& n : metric_names) out << std::setw(13) << n;
  out << '\n';
  for (const Row& r : rows) {
    const ModelConfig& m = r.run.model;
    const std::string lambda = m.cab.lambda_mode == LambdaMode::learnable ? "learnable" : "fixed";
    const std::string beta = !m.cab.filtering || m.cab.beta_override ? "0" : (m.learn_beta ? "learnable" : "fixed");
    out << std::setw(10) << ablation_name(r.preset) << std::setw(4) << m.temporal_heads
        << std::setw(11) << lambda << std::setw(11) << beta << std::setw(11)
        << (m.cab.filtering ? "on" : "off") << std::setw(11) << r.trainable << std::setw(8) << r.epochs;
    const json mj = metrics_record(r.test);
    for (const auto& n : metric_names) out << std::setw(13) << format_metric(mj[n].get<double>());
    out << '\n';
  }
  return kOk;
}

int cmd_bench(const BenchFlags& f, const std::string& out_dir, std::ostream& out) {
  BenchOptions opts;
  opts.lengths = f.lengths;
  opts.widths = f.widths;
  opts.repetitions = f.reps;
  opts.warmup = f.warmup;
  opts.threads = f.threads;
  opts.seed = f.seed;
  const std::string csv = bench_csv(run_bench(opts));
  out << csv;
  if (!f.out.empty()) {
    auto file = detail::open_for_write(resolve_in(out_dir, f.out));
    file << csv;
  }
  return kOk;
}

// Splices the key = value lines of `--config <file>` in right after the
// subcommand, so anything given on the command line comes later and wins.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 2; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    else continue;
    const auto extra = read_config_args(path);
    args.insert(args.begin() + 2, extra.begin(), extra.end());
    break;
  }
  return args;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(std::move(args));
  } catch (const FileError& e) {
    err << "error: --config: " << e.what() << '\n';
    return kFileError;
  } catch (const ParseError& e) {
    err << "error: --config: " << e.what() << '\n';
    return kUsage;
  }

  CLI::App app{"Correlated attention for multivariate time series: data generation, training, "
               "evaluation, ablations and benchmarks"};
  app.name("cab");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::string out_dir;
  std::string config_path;

  GenFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset with planted lags");
  add_config_option(gen_cmd, config_path);
  add_out_dir(gen_cmd, out_dir);
  gen_cmd->add_option("--task", gen.task, "imputation, anomaly or classification")
      ->required()->check(CLI::IsMember({"imputation", "anomaly", "classification"}));
  gen_cmd->add_option("--out", gen.out, "Output base name; writes <out>.train/.val/.test")->required();
  gen_cmd->add_option("--t", gen.t_len, "Series length")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  gen_cmd->add_option("--d", gen.d, "Feature count")->check(CLI::PositiveNumber)->capture_default_str();
  gen_cmd->add_option("--samples", gen.samples, "Sample count before splitting 0.6/0.2/0.2")->capture_default_str();
  gen_cmd->add_option("--mask-ratio", gen.mask_ratio, "Hidden fraction for imputation")
      ->check(CLI::Range(0.0, 1.0).description("in (0, 1)"))
      ->check([](const std::string& s) {
        const double v = std::stod(s);
        return v > 0.0 && v < 1.0 ? std::string() : std::string("must lie strictly between 0 and 1");
      })
      ->capture_default_str();
  gen_cmd->add_option("--lags", gen.lags, "Planted lags source:target:lag@weight, comma-separated");
  gen_cmd->add_option("--noise", gen.noise, "Noise std relative to each feature's std")
      ->check(CLI::NonNegativeNumber)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generation seed")->capture_default_str();
  gen_cmd->add_option("--anomalies", gen.anomalies, "Injected anomalies per sample")->capture_default_str();
  gen_cmd->add_option("--anomaly-magnitude", gen.anomaly_magnitude, "Spike size in feature standard deviations")
      ->check(CLI::NonNegativeNumber)->capture_default_str();

  TrainFlags train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint and metrics");
  add_config_option(train_cmd, config_path);
  add_out_dir(train_cmd, out_dir);
  add_train_flags(train_cmd, train, true);
  train_cmd->add_option("--checkpoint", train.checkpoint, "Checkpoint path (default <out-dir>/<run-id>.ckpt)");

  EvalFlags eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Report test metrics of a checkpoint");
  add_config_option(eval_cmd, config_path);
  add_out_dir(eval_cmd, out_dir);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset base path")->required();
  eval_cmd->add_option("--anomaly-quantile", eval.anomaly_quantile, "Anomaly threshold quantile")
      ->check(CLI::Range(0.0, 1.0))->capture_default_str();
  eval_cmd->add_option("--metrics", eval.metrics, "Also append the record to this NDJSON file");

  TrainFlags ablate;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Train the baseline and every ablation preset and compare");
  add_config_option(ablate_cmd, config_path);
  add_out_dir(ablate_cmd, out_dir);
  add_train_flags(ablate_cmd, ablate, false);

  BenchFlags bench;
  CLI::App* bench_cmd = app.add_subcommand("bench", "Time naive vs FFT lag scoring and the correlated attention forward pass");
  add_config_option(bench_cmd, config_path);
  add_out_dir(bench_cmd, out_dir);
  bench_cmd->add_option("--t", bench.lengths, "Series lengths")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--dk", bench.widths, "Head widths")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--reps", bench.reps, "Timed repetitions")->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--warmup", bench.warmup, "Untimed warmup runs")->check(CLI::NonNegativeNumber)->capture_default_str();
  bench_cmd->add_option("--threads", bench.threads, "Worker threads in the FFT path")->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed, "Input seed")->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "Also write the CSV here");

  // Vector options collect every occurrence; keep only the last one given so
  // the command line overrides a config file.
  for (CLI::Option* o : {bench_cmd->get_option("--t"), bench_cmd->get_option("--dk")})
    o->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->expected(1, 1 << 20);

  std::vector<const char*> cargv;
  for (const auto& a : args) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    CLI::App* sub = nullptr;
    if (args.size() > 1)
      for (CLI::App* s : app.get_subcommands({})) if (s->get_name() == args[1]) sub = s;
    err << (sub ? sub->help() : app.help());
    return kUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, out_dir, out);
    if (train_cmd->parsed()) return cmd_train(train, out_dir, out);
    if (eval_cmd->parsed()) return cmd_eval(eval, out_dir, out);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate, out_dir, out);
    if (bench_cmd->parsed()) return cmd_bench(bench, out_dir, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FileError& e) {
    err << "error: " << e.what() << '\n';
    return kFileError;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kFileError;
  } catch (const NumericalError& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace cab::cli
