#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cab/model.hpp"
#include "cab/params.hpp"
#include "cab/synthdata.hpp"

namespace cab {

enum class OptimizerKind { adam, sgd };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

// Updates trainable parameters from their grad slots. Adam uses
// β1 = 0.9, β2 = 0.999, ε = 1e-8 with bias correction.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr);

  void step(ParamSet& params);
  double lr() const { return lr_; }
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

// Zero grads, forward, loss, backward with each sample's selection frozen at
// its own forward pass, then one optimizer update. Returns the pre-update mean
// loss. Throws NumericalError (before touching any parameter) when the loss or
// a gradient is not finite.
double train_step(ModelParams& params, Optimizer& optimizer,
                  std::span<const SeriesSample* const> batch);

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t patience = 10;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;  // shuffling
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds_per_iter = 0.0;
  std::size_t iterations = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

// Mean task loss over a dataset without touching gradients.
double dataset_loss(const ModelParams& params, const Dataset& data);

// Trains until `epochs` or until the validation loss has not improved for
// `patience` consecutive epochs, then restores the best parameters.
TrainResult train_model(ModelParams& params, const Dataset& train, const Dataset& val,
                        const TrainOptions& options,
                        const std::function<void(const EpochStats&)>& on_epoch = {});

// Linear interpolation between order statistics; q in [0, 1].
double quantile(std::vector<double> values, double q);

struct AnomalyDecision {
  std::vector<int> labels;
  double threshold = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  // Set when every reference error is equal, so the quantile cannot separate
  // anything.
  bool threshold_degenerate = false;
};

// Flags errors strictly above the q-quantile of `reference_errors`.
// Conventions: precision is 1 when nothing is flagged and nothing is true,
// recall is 1 when nothing is true and nothing is flagged, and F1 is 0 when
// precision + recall is 0.
AnomalyDecision anomaly_decision(std::span<const double> reference_errors,
                                 std::span<const double> errors, std::span<const int> truth,
                                 double q);
AnomalyDecision anomaly_decision(std::span<const double> errors, std::span<const int> truth,
                                 double q);

struct Metrics {
  Task task = Task::imputation;
  double loss = 0.0;
  double mse = 0.0, mae = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0, threshold = 0.0;
  bool threshold_degenerate = false;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

// Test metrics. Anomaly thresholds come from the per-step reconstruction
// errors of `val`.
Metrics evaluate_model(const ModelParams& params, const Dataset& test, const Dataset& val,
                       double anomaly_quantile = 0.95);

}  // namespace cab
