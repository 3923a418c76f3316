#include "cab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "cab/errors.hpp"

namespace cab {

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)");
}

Optimizer::Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ParameterError("learning rate must be non-negative");
}

void Optimizer::step(ParamSet& params) {
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (Param& p : params) {
      if (!p.trainable) continue;
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr_ * p.grad[i];
    }
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const Param& p : params) {
      m_.emplace_back(p.value.rows(), p.value.cols());
      v_.emplace_back(p.value.rows(), p.value.cols());
    }
  }
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  std::size_t k = 0;
  for (Param& p : params) {
    Matrix& m = m_[k];
    Matrix& v = v_[k];
    ++k;
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

double train_step(ModelParams& params, Optimizer& optimizer,
                  std::span<const SeriesSample* const> batch) {
  if (batch.empty()) throw DegenerateError("train_step: empty batch");
  params.set.zero_grad();
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double loss = sample_loss(params, *batch[i], true, scale);
    if (!std::isfinite(loss))
      throw NumericalError("non-finite loss " + std::to_string(loss) + " on batch entry " +
                           std::to_string(i));
    total += loss;
  }
  for (const Param& p : params.set) {
    if (!p.trainable) continue;
    if (!p.grad.all_finite()) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
  }
  optimizer.step(params.set);
  return total * scale;
}

double dataset_loss(const ModelParams& params, const Dataset& data) {
  if (data.samples.empty()) throw DegenerateError("dataset_loss: empty dataset");
  const Task task = params.config.task;
  double total = 0.0;
  for (const SeriesSample& s : data.samples) {
    const Matrix* mask = task == Task::imputation && s.mask ? &*s.mask : nullptr;
    total += task_loss(task, model_forward(params, s.values, mask).output, s).loss;
  }
  return total / static_cast<double>(data.samples.size());
}

TrainResult train_model(ModelParams& params, const Dataset& train, const Dataset& val,
                        const TrainOptions& options,
                        const std::function<void(const EpochStats&)>& on_epoch) {
  if (train.samples.empty()) throw DegenerateError("train_model: empty training set");
  if (options.batch_size == 0) throw ConfigError("batch size must be at least 1");
  Optimizer optimizer(options.optimizer, options.lr);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(train.samples.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::vector<Matrix> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    stats.epoch = epoch;
    double loss_sum = 0.0;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t pos = 0; pos < order.size(); pos += options.batch_size) {
      std::vector<const SeriesSample*> batch;
      for (std::size_t i = pos; i < std::min(order.size(), pos + options.batch_size); ++i)
        batch.push_back(&train.samples[order[i]]);
      loss_sum += train_step(params, optimizer, batch);
      ++stats.iterations;
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    stats.train_loss = loss_sum / static_cast<double>(stats.iterations);
    stats.seconds_per_iter = elapsed / static_cast<double>(stats.iterations);
    stats.val_loss = val.samples.empty() ? stats.train_loss : dataset_loss(params, val);
    if (!std::isfinite(stats.val_loss)) throw NumericalError("non-finite validation loss");
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (result.best_epoch == 0 || stats.val_loss < result.best_val_loss) {
      result.best_epoch = epoch;
      result.best_val_loss = stats.val_loss;
      best.clear();
      for (const Param& p : params.set) best.push_back(p.value);
      since_best = 0;
    } else if (++since_best >= options.patience) {
      result.early_stopped = true;
      break;
    }
  }
  if (!best.empty()) {
    std::size_t k = 0;
    for (Param& p : params.set) p.value = best[k++];
  }
  return result;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DegenerateError("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw ParameterError("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

AnomalyDecision anomaly_decision(std::span<const double> reference_errors,
                                 std::span<const double> errors, std::span<const int> truth,
                                 double q) {
  if (!(q > 0.0 && q < 1.0)) throw ParameterError("threshold quantile must lie in (0, 1)");
  if (errors.size() != truth.size())
    throw ShapeError("anomaly_decision: " + std::to_string(errors.size()) + " errors vs " +
                     std::to_string(truth.size()) + " labels");
  for (double e : reference_errors)
    if (!std::isfinite(e)) throw NumericalError("anomaly_decision: non-finite reference error");
  for (double e : errors)
    if (!std::isfinite(e)) throw NumericalError("anomaly_decision: non-finite error");

  AnomalyDecision d;
  d.threshold = quantile(std::vector<double>(reference_errors.begin(), reference_errors.end()), q);
  const auto [mn, mx] = std::minmax_element(reference_errors.begin(), reference_errors.end());
  d.threshold_degenerate = *mn == *mx;
  d.labels.resize(errors.size());
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    d.labels[i] = errors[i] > d.threshold ? 1 : 0;
    if (d.labels[i] && truth[i]) ++tp;
    if (d.labels[i] && !truth[i]) ++fp;
    if (!d.labels[i] && truth[i]) ++fn;
  }
  d.precision = tp + fp > 0 ? tp / (tp + fp) : (fn == 0 ? 1.0 : 0.0);
  d.recall = tp + fn > 0 ? tp / (tp + fn) : (fp == 0 ? 1.0 : 0.0);
  d.f1 = d.precision + d.recall > 0 ? 2 * d.precision * d.recall / (d.precision + d.recall) : 0.0;
  return d;
}

AnomalyDecision anomaly_decision(std::span<const double> errors, std::span<const int> truth,
                                 double q) {
  return anomaly_decision(errors, errors, truth, q);
}

namespace {

std::vector<double> step_errors(const Matrix& output, const Matrix& target) {
  std::vector<double> err(output.rows(), 0.0);
  for (std::size_t t = 0; t < output.rows(); ++t) {
    for (std::size_t j = 0; j < output.cols(); ++j) {
      const double diff = output(t, j) - target(t, j);
      err[t] += diff * diff;
    }
    err[t] /= static_cast<double>(output.cols());
  }
  return err;
}

}  // namespace

Metrics evaluate_model(const ModelParams& params, const Dataset& test, const Dataset& val,
                       double anomaly_quantile) {
  if (test.samples.empty()) throw DegenerateError("evaluate_model: empty test set");
  const Task task = params.config.task;
  Metrics m;
  m.task = task;
  m.samples = test.samples.size();
  double sq = 0.0, ab = 0.0, count = 0.0, correct = 0.0;
  std::vector<double> errors;
  std::vector<int> truth;
  for (const SeriesSample& s : test.samples) {
    const Matrix* mask = task == Task::imputation && s.mask ? &*s.mask : nullptr;
    const Matrix out = model_forward(params, s.values, mask).output;
    m.loss += task_loss(task, out, s).loss;
    if (task == Task::classification) {
      const auto best = std::max_element(out.values().begin(), out.values().end()) - out.values().begin();
      correct += best == *s.label ? 1.0 : 0.0;
      continue;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (mask && (*mask)[i] != 0.0) continue;
      const double diff = out[i] - s.values[i];
      sq += diff * diff;
      ab += std::abs(diff);
      count += 1.0;
    }
    if (task == Task::anomaly) {
      if (!s.anomaly_flags) throw DegenerateError("anomaly sample has no ground-truth flags");
      const auto e = step_errors(out, s.values);
      errors.insert(errors.end(), e.begin(), e.end());
      truth.insert(truth.end(), s.anomaly_flags->begin(), s.anomaly_flags->end());
    }
  }
  m.loss /= static_cast<double>(test.samples.size());
  if (task == Task::classification) {
    m.accuracy = correct / static_cast<double>(test.samples.size());
    return m;
  }
  m.mse = sq / count;
  m.mae = ab / count;
  if (task == Task::anomaly) {
    std::vector<double> reference;
    for (const SeriesSample& s : val.samples) {
      const auto e = step_errors(model_forward(params, s.values).output, s.values);
      reference.insert(reference.end(), e.begin(), e.end());
    }
    if (reference.empty()) reference = errors;
    const AnomalyDecision d = anomaly_decision(reference, errors, truth, anomaly_quantile);
    m.precision = d.precision;
    m.recall = d.recall;
    m.f1 = d.f1;
    m.threshold = d.threshold;
    m.threshold_degenerate = d.threshold_degenerate;
  }
  return m;
}

}  // namespace cab
