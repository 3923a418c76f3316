#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "cab/checkpoint.hpp"
#include "cab/errors.hpp"
#include "cab/model.hpp"
#include "cab/numerics.hpp"
#include "cab/train.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cab;
using cab::testing::random_matrix;

namespace {

ModelConfig small_config(Task task, ModelKind kind) {
  ModelConfig cfg;
  cfg.task = task;
  cfg.kind = kind;
  cfg.seq_len = 8;
  cfg.d_in = 3;
  cfg.d_model = 4;
  cfg.d_k = 4;
  cfg.heads = 2;
  cfg.temporal_heads = 1;
  cfg.blocks = 1;
  cfg.num_classes = task == Task::classification ? 3 : 0;
  return cfg;
}

SeriesSample small_sample(const ModelConfig& cfg, std::uint64_t seed) {
  SeriesSample s;
  s.values = random_matrix(cfg.seq_len, cfg.d_in, seed);
  if (cfg.task == Task::imputation) s = apply_mask(s, 0.25, seed + 1);
  if (cfg.task == Task::anomaly) s = inject_anomalies(s, 1, 3.0, seed + 2);
  if (cfg.task == Task::classification) s.label = static_cast<int>(seed % cfg.num_classes);
  return s;
}

GradCheckReport model_gradient_check(ModelParams& params, const SeriesSample& s) {
  SelectionTable frozen;
  sample_loss(params, s, false, 1.0, {}, &frozen);
  ForwardOptions opts;
  opts.frozen = &frozen;
  auto loss = [&] { return sample_loss(params, s, false, 1.0, opts); };
  auto analytic = [&] {
    params.set.zero_grad();
    sample_loss(params, s, true, 1.0, opts);
  };
  return check_gradient(params.set, loss, analytic);
}

Dataset toy_imputation(std::size_t samples, std::uint64_t seed) {
  DatasetSpec spec;
  spec.length = 24;
  spec.features = 4;
  spec.samples = samples;
  spec.lags = {{0, 1, 3, 0.9}};
  spec.seed = seed;
  return gen_lagged_series(spec);
}

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.seq_len = 24;
  cfg.d_in = 4;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.temporal_heads = 1;
  cfg.blocks = 1;
  return cfg;
}

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cab_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("stationarize") {
  SUBCASE("two-point column") {
    const auto [xs, stats] = stationarize(Matrix::from_rows({{0.0}, {2.0}}));
    CHECK(stats.mu[0] == 1.0);
    CHECK(stats.sigma[0] == 1.0);
    CHECK(xs == Matrix::from_rows({{-1.0}, {1.0}}));
  }
  SUBCASE("constant feature") {
    const auto [xs, stats] = stationarize(Matrix(5, 2, 3.0));
    CHECK(stats.sigma[0] == kSigmaFloor);
    for (double v : xs.values()) CHECK(v == 0.0);
  }
  SUBCASE("moments and roundtrip") {
    const Matrix x = random_matrix(50, 4, 1, 3.0) + Matrix(50, 4, 7.0);
    const auto [xs, stats] = stationarize(x);
    const Matrix mean = column_means(xs);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::abs(mean[j]) < 1e-10);
      double var = 0.0;
      for (std::size_t t = 0; t < 50; ++t) var += xs(t, j) * xs(t, j);
      CHECK(std::abs(std::sqrt(var / 50.0) - 1.0) < 1e-10);
      CHECK(stats.sigma[j] >= kSigmaFloor);
    }
    CHECK(max_abs_diff(destationarize(xs, stats), x) <= 1e-10);
  }
  SUBCASE("masked statistics ignore hidden entries") {
    const Matrix x = Matrix::from_rows({{0.0}, {100.0}, {2.0}});
    const Matrix mask = Matrix::from_rows({{1.0}, {0.0}, {1.0}});
    const auto [xs, stats] = stationarize(x, &mask);
    CHECK(stats.mu[0] == 1.0);
    CHECK(stats.sigma[0] == 1.0);
    CHECK(xs == Matrix::from_rows({{-1.0}, {0.0}, {1.0}}));
  }
}

TEST_CASE("model structure") {
  SUBCASE("closed-form parameter count") {
    for (Task task : {Task::imputation, Task::anomaly, Task::classification}) {
      for (ModelKind kind : {ModelKind::transformer, ModelKind::nonstationary}) {
        for (std::size_t m : {0u, 1u, 2u}) {
          ModelConfig cfg = small_config(task, kind);
          cfg.temporal_heads = m;
          cfg.blocks = 2;
          const ModelParams p = init_model(cfg, 3);
          CHECK(p.set.entry_count() == parameter_count(cfg));
          std::set<std::string> names;
          for (const Param& param : p.set) names.insert(param.name);
          CHECK(names.size() == p.set.size());
        }
      }
    }
    ModelConfig a;
    ModelConfig b = a;
    b.temporal_heads = b.heads;
    CHECK(parameter_count(a) - parameter_count(b) == 3 * (a.heads - a.temporal_heads) * a.blocks);
  }
  SUBCASE("default heads") {
    const ModelConfig cfg;
    CHECK(cfg.heads == 16);
    CHECK(cfg.temporal_heads == 8);
    CHECK(cfg.head_dim() == 4);
    CHECK(cfg.cab.lambda() == 0.5);
    CHECK(cfg.cab.beta() == 0.5);
    CHECK(cfg.cab.tau() == doctest::Approx(1.0));
    CHECK(default_lambda_mode(4) == LambdaMode::fixed);
    CHECK(default_lambda_mode(128) == LambdaMode::learnable);
  }
  SUBCASE("config errors") {
    ModelConfig cfg = small_config(Task::imputation, ModelKind::transformer);
    cfg.temporal_heads = 3;
    CHECK_THROWS_AS(init_model(cfg, 0), ConfigError);
    cfg = small_config(Task::classification, ModelKind::transformer);
    cfg.num_classes = 1;
    CHECK_THROWS_AS(init_model(cfg, 0), ConfigError);
    cfg = ModelConfig{};
    cfg.d_model = 30;
    CHECK_THROWS_AS(init_model(cfg, 0), ConfigError);
  }
  SUBCASE("encoder with no blocks is the embedding") {
    ModelConfig cfg = small_config(Task::imputation, ModelKind::transformer);
    cfg.blocks = 0;
    const ModelParams p = init_model(cfg, 4);
    const Matrix x = random_matrix(8, 3, 5);
    CHECK(encoder_forward(p, x) == matmul(x, p.set[p.embed].value));
  }
  SUBCASE("output shapes and determinism") {
    for (Task task : {Task::imputation, Task::anomaly, Task::classification}) {
      const ModelConfig cfg = small_config(task, ModelKind::nonstationary);
      const ModelParams p = init_model(cfg, 6);
      const SeriesSample s = small_sample(cfg, 7);
      const Matrix* mask = s.mask ? &*s.mask : nullptr;
      const Matrix out = model_forward(p, s.values, mask).output;
      CHECK(out.rows() == (task == Task::classification ? 1u : 8u));
      CHECK(out.cols() == 3);
      CHECK(model_forward(init_model(cfg, 6), s.values, mask).output == out);
    }
  }
  SUBCASE("hidden values do not leak into the input") {
    const ModelConfig cfg = small_config(Task::imputation, ModelKind::transformer);
    const ModelParams p = init_model(cfg, 8);
    SeriesSample s = small_sample(cfg, 9);
    const Matrix before = model_forward(p, s.values, &*s.mask).output;
    for (std::size_t i = 0; i < s.values.size(); ++i)
      if ((*s.mask)[i] == 0.0) s.values[i] = 1e6;
    CHECK(model_forward(p, s.values, &*s.mask).output == before);
  }
}

TEST_CASE("losses") {
  const Matrix target = random_matrix(6, 3, 20);
  CHECK(reconstruction_loss(target, target, nullptr).loss == 0.0);
  const Matrix out = random_matrix(6, 3, 21);
  const Matrix all_hidden(6, 3, 0.0);
  CHECK(reconstruction_loss(out, target, &all_hidden).loss == reconstruction_loss(out, target, nullptr).loss);
  double mse = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) mse += (out[i] - target[i]) * (out[i] - target[i]);
  CHECK(reconstruction_loss(out, target, nullptr).loss == doctest::Approx(mse / 18.0).epsilon(1e-14));
  const Matrix none_hidden(6, 3, 1.0);
  CHECK_THROWS_AS(reconstruction_loss(out, target, &none_hidden), DegenerateError);

  CHECK(cross_entropy_loss(Matrix(1, 5, 0.3), 2).loss == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  CHECK(cross_entropy_loss(Matrix::from_rows({{1000.0, 0.0}}), 0).loss == doctest::Approx(0.0));
  CHECK_THROWS_AS(cross_entropy_loss(Matrix(1, 3), 3), ParameterError);

  SeriesSample s;
  s.values = target;
  CHECK_THROWS_AS(task_loss(Task::imputation, out, s), DegenerateError);

  const auto r = cab::testing::check_unary_adjoint(
      random_matrix(1, 4, 22), [](const Matrix& z) { return Matrix(1, 1, cross_entropy_loss(z, 1).loss); },
      [](const Matrix& z, const Matrix& g) { return cross_entropy_loss(z, 1).grad * g[0]; }, 23);
  CHECK(r.passed);
}

TEST_CASE("full-model gradients") {
  SUBCASE("non-stationary imputation model") {
    const ModelConfig cfg = small_config(Task::imputation, ModelKind::nonstationary);
    ModelParams p = init_model(cfg, 31);
    const GradCheckReport r = model_gradient_check(p, small_sample(cfg, 32));
    for (const auto& pc : r.params) {
      INFO(pc.name << " rel " << pc.max_rel_error);
      CHECK(pc.passed);
    }
    CHECK(r.find("block0.head1.beta_raw") != nullptr);
    CHECK(r.find("block0.head1.tau_raw") != nullptr);
    CHECK(r.find("destat.xi.w1") != nullptr);
    CHECK(r.find("destat.delta.w2") != nullptr);
    CHECK(r.max_rel_error <= 1e-4);
  }
  for (Task task : {Task::anomaly, Task::classification}) {
    ModelConfig cfg = small_config(task, ModelKind::transformer);
    cfg.blocks = 2;
    cfg.cab.lambda_mode = LambdaMode::learnable;
    ModelParams p = init_model(cfg, 41);
    const GradCheckReport r = model_gradient_check(p, small_sample(cfg, 42));
    CHECK(r.find("block1.head1.lambda_raw") != nullptr);
    for (const auto& pc : r.params) {
      INFO(task_name(task) << " " << pc.name << " rel " << pc.max_rel_error);
      CHECK(pc.passed);
    }
  }
}

TEST_CASE("train_step") {
  const Dataset data = toy_imputation(12, 1);
  std::vector<const SeriesSample*> batch;
  for (const auto& s : data.samples) batch.push_back(&s);

  SUBCASE("zero learning rate leaves parameters bitwise unchanged") {
    for (OptimizerKind kind : {OptimizerKind::adam, OptimizerKind::sgd}) {
      ModelParams p = init_model(toy_config(), 2);
      const ModelParams before = p;
      Optimizer opt(kind, 0.0);
      const double loss = train_step(p, opt, batch);
      CHECK(std::isfinite(loss));
      std::size_t k = 0;
      for (const Param& param : p.set) CHECK(param.value == before.set[k++].value);
    }
    CHECK_THROWS_AS(Optimizer(OptimizerKind::adam, -1.0), ParameterError);
  }
  SUBCASE("returns the pre-update loss") {
    ModelParams p = init_model(toy_config(), 3);
    double expected = 0.0;
    for (const auto* s : batch) expected += sample_loss(p, *s, false);
    Optimizer opt(OptimizerKind::adam, 1e-2);
    CHECK(train_step(p, opt, batch) == doctest::Approx(expected / 12.0).epsilon(1e-12));
  }
  SUBCASE("non-finite input aborts without an update") {
    ModelParams p = init_model(toy_config(), 4);
    const ModelParams before = p;
    SeriesSample bad = data.samples[0];
    for (std::size_t i = 0; i < bad.values.size(); ++i)
      if ((*bad.mask)[i] == 0.0) {
        bad.values[i] = std::nan("");
        break;
      }
    const SeriesSample* one[] = {&bad};
    Optimizer opt(OptimizerKind::adam, 1e-2);
    CHECK_THROWS_AS(train_step(p, opt, one), NumericalError);
    std::size_t k = 0;
    for (const Param& param : p.set) CHECK(param.value == before.set[k++].value);
  }
  SUBCASE("two hundred steps reduce the loss") {
    ModelParams p = init_model(toy_config(), 5);
    const double initial = dataset_loss(p, data);
    Optimizer opt(OptimizerKind::adam, 3e-3);
    for (int step = 0; step < 200; ++step) {
      const std::vector<const SeriesSample*> mini{batch[(2 * step) % 12], batch[(2 * step + 1) % 12]};
      train_step(p, opt, mini);
    }
    const double final_loss = dataset_loss(p, data);
    INFO("initial " << initial << " final " << final_loss);
    CHECK(final_loss < initial);
  }
}

TEST_CASE("train_model") {
  const Dataset train = toy_imputation(12, 10);
  const Dataset val = toy_imputation(4, 11);
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 4;
  opts.lr = 1e-2;
  opts.seed = 5;

  ModelParams a = init_model(toy_config(), 6);
  ModelParams b = init_model(toy_config(), 6);
  std::size_t calls = 0;
  const TrainResult ra = train_model(a, train, val, opts, [&](const EpochStats&) { ++calls; });
  const TrainResult rb = train_model(b, train, val, opts);
  CHECK(calls == 3);
  REQUIRE(ra.history.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(ra.history[e].train_loss == rb.history[e].train_loss);
    CHECK(ra.history[e].val_loss == rb.history[e].val_loss);
    CHECK(ra.history[e].iterations == 3);
  }
  std::size_t k = 0;
  for (const Param& param : a.set) CHECK(param.value == b.set[k++].value);
  // the restored parameters are the best epoch's
  CHECK(dataset_loss(a, val) == ra.best_val_loss);

  SUBCASE("patience stops training") {
    TrainOptions stop = opts;
    stop.epochs = 50;
    stop.patience = 1;
    stop.lr = 0.5;  // large steps make validation loss bounce
    ModelParams c = init_model(toy_config(), 7);
    const TrainResult rc = train_model(c, train, val, stop);
    CHECK(rc.early_stopped);
    CHECK(rc.history.size() < 50);
    CHECK(rc.history.size() == rc.best_epoch + 1);
  }
}

TEST_CASE("anomaly_decision") {
  SUBCASE("single spike") {
    const std::vector<double> err{0, 0, 0, 10};
    const std::vector<int> truth{0, 0, 0, 1};
    const AnomalyDecision d = anomaly_decision(err, truth, 0.9);
    CHECK(d.labels == truth);
    CHECK(d.precision == 1.0);
    CHECK(d.recall == 1.0);
    CHECK(d.f1 == 1.0);
    CHECK_FALSE(d.threshold_degenerate);
  }
  SUBCASE("nothing flagged and nothing true") {
    const std::vector<double> ref{1, 2, 3, 4};
    const std::vector<double> err{0.5, 0.5};
    const std::vector<int> truth{0, 0};
    const AnomalyDecision d = anomaly_decision(ref, err, truth, 0.9);
    CHECK(d.precision == 1.0);
    CHECK(d.recall == 1.0);
    CHECK(d.f1 == 1.0);
  }
  SUBCASE("degenerate threshold") {
    const std::vector<double> err{2, 2, 2};
    const std::vector<int> truth{0, 1, 0};
    const AnomalyDecision d = anomaly_decision(err, truth, 0.5);
    CHECK(d.threshold_degenerate);
    CHECK(d.labels == std::vector<int>{0, 0, 0});
    CHECK(d.precision == 0.0);
    CHECK(d.recall == 0.0);
    CHECK(d.f1 == 0.0);
  }
  SUBCASE("brute-force counting oracle") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> ref(40), err(60);
      std::vector<int> truth(60);
      for (double& v : ref) v = u(rng);
      for (std::size_t i = 0; i < 60; ++i) {
        err[i] = u(rng);
        truth[i] = u(rng) < 0.2;
      }
      const double q = 0.5 + 0.45 * u(rng);
      const AnomalyDecision d = anomaly_decision(ref, err, truth, q);
      // independent threshold: interpolated order statistic
      std::vector<double> sorted = ref;
      std::sort(sorted.begin(), sorted.end());
      const double pos = q * 39.0;
      const std::size_t lo = static_cast<std::size_t>(pos);
      const double thr = sorted[lo] + (pos - lo) * (sorted[std::min<std::size_t>(lo + 1, 39)] - sorted[lo]);
      CHECK(d.threshold == doctest::Approx(thr).epsilon(1e-14));
      int tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < 60; ++i) {
        const bool flag = err[i] > thr;
        tp += flag && truth[i];
        fp += flag && !truth[i];
        fn += !flag && truth[i];
      }
      const double p = tp + fp ? double(tp) / (tp + fp) : (fn ? 0.0 : 1.0);
      const double r = tp + fn ? double(tp) / (tp + fn) : (fp ? 0.0 : 1.0);
      CHECK(d.precision == p);
      CHECK(d.recall == r);
      CHECK(d.f1 == doctest::Approx(p + r > 0 ? 2 * p * r / (p + r) : 0.0).epsilon(1e-15));
    }
  }
  SUBCASE("errors") {
    const std::vector<double> err{1, 2};
    const std::vector<int> truth{0};
    CHECK_THROWS_AS(anomaly_decision(err, truth, 0.5), ShapeError);
    const std::vector<int> truth2{0, 1};
    CHECK_THROWS_AS(anomaly_decision(err, truth2, 1.0), ParameterError);
  }
  CHECK(quantile({3, 1, 2}, 0.5) == 2.0);
  CHECK(quantile({0, 10}, 0.25) == 2.5);
}

TEST_CASE("evaluate_model") {
  for (Task task : {Task::imputation, Task::anomaly, Task::classification}) {
    DatasetSpec spec;
    spec.task = task;
    spec.length = 16;
    spec.features = 3;
    spec.samples = 6;
    spec.anomalies_per_sample = 2;
    spec.lags = {{0, 1, 2, 1.0}, {1, 2, 5, 1.0}};
    const Dataset data = gen_lagged_series(spec);
    ModelConfig cfg = toy_config();
    cfg.task = task;
    cfg.seq_len = 16;
    cfg.d_in = 3;
    cfg.num_classes = 2;
    const Metrics m = evaluate_model(init_model(cfg, 1), data, data, 0.9);
    CHECK(m.samples == 6);
    CHECK(std::isfinite(m.loss));
    if (task == Task::classification) {
      CHECK(m.accuracy >= 0.0);
      CHECK(m.accuracy <= 1.0);
    } else {
      CHECK(m.mse > 0.0);
      CHECK(m.mae > 0.0);
    }
    if (task == Task::anomaly) {
      CHECK(m.f1 >= 0.0);
      CHECK(m.f1 <= 1.0);
    }
  }
}

TEST_CASE("checkpoint files") {
  for (ModelKind kind : {ModelKind::transformer, ModelKind::nonstationary}) {
    ModelConfig cfg = small_config(Task::classification, kind);
    cfg.cab.beta_override = 0.25;
    cfg.cab.tau_raw = 0.1234567890123;
    cfg.learn_tau = false;
    ModelParams p = init_model(cfg, 50);
    p.set.at("embed").value[0] = 1.0 / 3.0;
    const auto path = temp_file(std::string(model_kind_name(kind)) + ".ckpt");
    save_checkpoint(path, p);
    const ModelParams back = load_checkpoint(path);
    CHECK(back.config == p.config);
    REQUIRE(back.set.size() == p.set.size());
    std::size_t k = 0;
    for (const Param& param : back.set) {
      CHECK(param.name == p.set[k].name);
      CHECK(param.value == p.set[k].value);
      CHECK(param.trainable == p.set[k].trainable);
      ++k;
    }
    const SeriesSample s = small_sample(cfg, 51);
    CHECK(model_forward(back, s.values).output == model_forward(p, s.values).output);
  }
  SUBCASE("config entries roundtrip") {
    ModelConfig cfg;
    cfg.cab.lambda_mode = LambdaMode::learnable;
    cfg.lag_path = LagPath::naive;
    CHECK(model_config_from_entries(model_config_entries(cfg)) == cfg);
    CHECK_THROWS_AS(model_config_from_entries({{"bogus", "1"}}), ConfigError);
    CHECK_THROWS_AS(model_config_from_entries({{"heads", "x"}}), ConfigError);
  }
  SUBCASE("malformed checkpoints") {
    const auto path = temp_file("bad.ckpt");
    std::ofstream(path) << "cab-checkpoint 1\nconfig 1\nheads=oops\n";
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
    std::ofstream(path) << "something else\n";
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
    CHECK_THROWS_AS(load_checkpoint(temp_file("missing.ckpt")), FileError);
    const ModelParams p = init_model(small_config(Task::anomaly, ModelKind::transformer), 1);
    save_checkpoint(path, p);
    std::string text;
    {
      std::ifstream in(path);
      text.assign(std::istreambuf_iterator<char>(in), {});
    }
    text.resize(text.size() - 5);
    std::ofstream(path) << text;
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  }
}
