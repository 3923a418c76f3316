#include "cab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "cab/errors.hpp"
#include "cab/numerics.hpp"
#include "text_io.hpp"

namespace cab {

namespace {

using detail::LineReader;

constexpr std::string_view kDatasetTag = "cab-dataset 1";

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

std::vector<double> column_stddev(const Matrix& x) {
  std::vector<double> sd(x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t) mean += x(t, j);
    mean /= static_cast<double>(x.rows());
    double var = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t) var += (x(t, j) - mean) * (x(t, j) - mean);
    sd[j] = std::sqrt(var / static_cast<double>(x.rows()));
  }
  return sd;
}

Matrix base_process(std::size_t t_len, std::size_t d, const DatasetSpec& spec,
                    std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> period(8.0, 48.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const double phi = spec.ar_coefficient;
  Matrix x(t_len, d);
  for (std::size_t j = 0; j < d; ++j) {
    double state = gauss(rng) / std::sqrt(1.0 - phi * phi);
    const double p = period(rng);
    const double ph = phase(rng);
    for (std::size_t t = 0; t < t_len; ++t) {
      if (t > 0) state = phi * state + gauss(rng);
      x(t, j) = state + spec.seasonal_amplitude *
                            std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / p + ph);
    }
  }
  return x;
}

void plant(Matrix& x, const PlantedLag& pl) {
  Matrix source(x.rows(), 1);
  for (std::size_t t = 0; t < x.rows(); ++t) source(t, 0) = x(t, pl.source);
  const Matrix delayed = roll(source, pl.lag);
  for (std::size_t t = 0; t < x.rows(); ++t)
    x(t, pl.target) = (1.0 - pl.weight) * x(t, pl.target) + pl.weight * delayed(t, 0);
}

}  // namespace

std::string_view task_name(Task task) {
  switch (task) {
    case Task::imputation: return "imputation";
    case Task::anomaly: return "anomaly";
    case Task::classification: return "classification";
  }
  return "imputation";
}

Task parse_task(std::string_view name) {
  if (name == "imputation") return Task::imputation;
  if (name == "anomaly") return Task::anomaly;
  if (name == "classification") return Task::classification;
  throw ConfigError("unknown task '" + std::string(name) +
                    "' (expected imputation, anomaly or classification)");
}

PlantedLag parse_planted_lag(std::string_view text) {
  const auto bad = [&] {
    return ConfigError("malformed lag '" + std::string(text) + "' (expected source:target:lag@weight)");
  };
  const auto at = text.find('@');
  const auto fields = detail::split(text.substr(0, at), ':');
  if (fields.size() != 3) throw bad();
  const auto src = detail::parse_int<std::size_t>(fields[0]);
  const auto dst = detail::parse_int<std::size_t>(fields[1]);
  const auto lag = detail::parse_int<std::size_t>(fields[2]);
  if (!src || !dst || !lag) throw bad();
  PlantedLag pl{*src, *dst, *lag, 1.0};
  if (at != std::string_view::npos) {
    const auto w = detail::parse_double(text.substr(at + 1));
    if (!w) throw bad();
    pl.weight = *w;
  }
  return pl;
}

std::vector<PlantedLag> parse_planted_lags(std::string_view text) {
  std::vector<PlantedLag> out;
  text = detail::trim(text);
  if (text.empty() || text == "-") return out;
  for (std::string_view part : detail::split(text, ',')) out.push_back(parse_planted_lag(detail::trim(part)));
  return out;
}

std::string format_planted_lags(const std::vector<PlantedLag>& lags) {
  if (lags.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(lags[i].source) + ':' + std::to_string(lags[i].target) + ':' +
         std::to_string(lags[i].lag) + '@' + detail::format_double(lags[i].weight);
  }
  return s;
}

void validate_spec(const DatasetSpec& spec) {
  if (spec.length < 2) throw ConfigError("series length must be at least 2");
  if (spec.features < 1) throw ConfigError("feature count must be at least 1");
  for (const PlantedLag& pl : spec.lags) {
    if (pl.lag < 1 || pl.lag >= spec.length)
      throw ConfigError("planted lag " + std::to_string(pl.lag) + " outside [1, " +
                        std::to_string(spec.length - 1) + "]");
    if (pl.source >= spec.features || pl.target >= spec.features)
      throw ConfigError("planted lag feature index outside [0, " +
                        std::to_string(spec.features - 1) + "]");
    if (pl.source == pl.target) throw ConfigError("planted lag source and target must differ");
  }
  if (!(spec.noise >= 0.0) || !std::isfinite(spec.noise)) throw ConfigError("noise must be non-negative");
  const double total = spec.train_ratio + spec.val_ratio + spec.test_ratio;
  if (spec.train_ratio < 0 || spec.val_ratio < 0 || spec.test_ratio < 0 || std::abs(total - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  if (!(std::abs(spec.ar_coefficient) < 1.0)) throw ConfigError("AR coefficient must lie in (-1, 1)");
  switch (spec.task) {
    case Task::imputation:
      if (!(spec.mask_ratio > 0.0 && spec.mask_ratio < 1.0))
        throw ConfigError("mask ratio must lie in (0, 1)");
      if (std::llround(spec.mask_ratio * static_cast<double>(spec.length * spec.features)) < 1)
        throw ConfigError("mask ratio hides no entries at this size");
      break;
    case Task::anomaly:
      if (spec.anomalies_per_sample >= spec.length)
        throw ConfigError("anomalies per sample must be below the series length");
      break;
    case Task::classification:
      if (spec.lags.size() < 2)
        throw ConfigError("classification needs at least two planted lags, one per class");
      break;
  }
}

Dataset gen_lagged_series(const DatasetSpec& spec) {
  validate_spec(spec);
  Dataset data;
  data.task = spec.task;
  data.samples.reserve(spec.samples);
  for (std::size_t n = 0; n < spec.samples; ++n) {
    auto rng = derived_rng(spec.seed, n, 0);
    SeriesSample s;
    s.values = base_process(spec.length, spec.features, spec, rng);
    if (spec.task == Task::classification) {
      std::uniform_int_distribution<std::size_t> pick(0, spec.lags.size() - 1);
      const std::size_t y = pick(rng);
      s.label = static_cast<int>(y);
      s.planted_lags = {spec.lags[y]};
    } else {
      s.planted_lags = spec.lags;
    }
    for (const PlantedLag& pl : s.planted_lags) plant(s.values, pl);
    if (spec.noise > 0.0) {
      const auto sd = column_stddev(s.values);
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (std::size_t t = 0; t < spec.length; ++t)
        for (std::size_t j = 0; j < spec.features; ++j) s.values(t, j) += spec.noise * sd[j] * gauss(rng);
    }
    const std::uint64_t follow_seed = rng();
    if (spec.task == Task::imputation) s = apply_mask(std::move(s), spec.mask_ratio, follow_seed);
    if (spec.task == Task::anomaly)
      s = inject_anomalies(std::move(s), spec.anomalies_per_sample, spec.anomaly_magnitude, follow_seed);
    data.samples.push_back(std::move(s));
  }
  return data;
}

SeriesSample apply_mask(SeriesSample sample, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("mask ratio must lie in (0, 1)");
  const std::size_t total = sample.values.size();
  const auto hidden = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  auto rng = derived_rng(seed, 0, 1);
  std::shuffle(order.begin(), order.end(), rng);
  Matrix mask(sample.values.rows(), sample.values.cols(), 1.0);
  for (std::size_t i = 0; i < hidden; ++i) mask[order[i]] = 0.0;
  sample.mask = std::move(mask);
  return sample;
}

SeriesSample inject_anomalies(SeriesSample sample, std::size_t count, double magnitude,
                              std::uint64_t seed) {
  const std::size_t t_len = sample.values.rows();
  if (count >= t_len) throw ParameterError("anomaly count must be below the series length");
  const auto sd = column_stddev(sample.values);
  std::vector<std::size_t> steps(t_len);
  std::iota(steps.begin(), steps.end(), 0);
  auto rng = derived_rng(seed, 0, 2);
  std::shuffle(steps.begin(), steps.end(), rng);
  std::uniform_int_distribution<std::size_t> feature(0, sample.values.cols() - 1);
  std::bernoulli_distribution sign(0.5);
  std::vector<int> flags = sample.anomaly_flags.value_or(std::vector<int>(t_len, 0));
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = steps[i];
    const std::size_t j = feature(rng);
    const double scale = sd[j] > 0.0 ? sd[j] : 1.0;
    sample.values(t, j) += (sign(rng) ? 1.0 : -1.0) * magnitude * scale;
    flags[t] = 1;
  }
  sample.anomaly_flags = std::move(flags);
  return sample;
}

DatasetSplits split_dataset(const Dataset& data, double train_ratio, double val_ratio) {
  if (train_ratio < 0 || val_ratio < 0 || train_ratio + val_ratio > 1.0 + 1e-12)
    throw ConfigError("split ratios must be non-negative and sum to at most 1");
  const std::size_t n = data.samples.size();
  const auto n_train = std::min<std::size_t>(n, std::llround(train_ratio * static_cast<double>(n)));
  const auto n_val = std::min<std::size_t>(n - n_train, std::llround(val_ratio * static_cast<double>(n)));
  DatasetSplits out;
  out.train.task = out.val.task = out.test.task = data.task;
  const auto begin = data.samples.begin();
  out.train.samples.assign(begin, begin + n_train);
  out.val.samples.assign(begin + n_train, begin + n_train + n_val);
  out.test.samples.assign(begin + n_train + n_val, data.samples.end());
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::size_t t_len = 0, d = 0;
  bool has_mask = false, has_label = false, has_flags = false;
  if (!data.samples.empty()) {
    const SeriesSample& first = data.samples.front();
    t_len = first.values.rows();
    d = first.values.cols();
    has_mask = first.mask.has_value();
    has_label = first.label.has_value();
    has_flags = first.anomaly_flags.has_value();
  }
  for (const SeriesSample& s : data.samples) {
    if (s.values.rows() != t_len || s.values.cols() != d)
      throw ShapeError("write_dataset: samples differ in shape");
    if (s.mask.has_value() != has_mask || s.label.has_value() != has_label ||
        s.anomaly_flags.has_value() != has_flags)
      throw ConfigError("write_dataset: samples differ in which optional fields are present");
    if (has_mask && !s.mask->same_shape(s.values)) throw ShapeError("write_dataset: mask shape");
    if (has_flags && s.anomaly_flags->size() != t_len) throw ShapeError("write_dataset: flag length");
  }

  std::string out;
  out += kDatasetTag;
  out += "\nlength " + std::to_string(t_len) + "\nfeatures " + std::to_string(d) + "\ntask " +
         std::string(task_name(data.task)) + "\nsamples " + std::to_string(data.samples.size()) +
         "\nfields";
  if (has_mask) out += " mask";
  if (has_label) out += " label";
  if (has_flags) out += " flags";
  out += '\n';
  for (std::size_t n = 0; n < data.samples.size(); ++n) {
    const SeriesSample& s = data.samples[n];
    out += "sample " + std::to_string(n) + "\nlags " + format_planted_lags(s.planted_lags) + '\n';
    if (has_label) out += "label " + std::to_string(*s.label) + '\n';
    out += "values\n";
    for (std::size_t t = 0; t < t_len; ++t) {
      detail::append_csv(out, s.values.row(t));
      out += '\n';
    }
    if (has_mask) {
      out += "mask\n";
      for (std::size_t t = 0; t < t_len; ++t) {
        detail::append_csv(out, s.mask->row(t));
        out += '\n';
      }
    }
    if (has_flags) {
      out += "flags ";
      for (std::size_t t = 0; t < t_len; ++t) {
        if (t) out += ',';
        out += std::to_string((*s.anomaly_flags)[t]);
      }
      out += '\n';
    }
  }
  auto file = detail::open_for_write(path);
  file << out;
  if (!file) throw FileError("failed writing '" + path.string() + "'");
}

namespace {

std::size_t read_count(LineReader& r, std::string_view key, bool allow_zero) {
  const std::string line = r.expect_line(key);
  const auto v = detail::parse_int<std::size_t>(r.expect_key(line, key));
  if (!v || (!allow_zero && *v == 0)) r.fail(key, "expected a non-negative integer, got '" + line + "'");
  return *v;
}

void read_rows(LineReader& r, std::string_view what, Matrix& m) {
  for (std::size_t t = 0; t < m.rows(); ++t) {
    const std::string line = r.expect_line(what);
    const auto cells = detail::split(line, ',');
    if (cells.size() != m.cols())
      r.fail(what, "expected " + std::to_string(m.cols()) + " values, got " + std::to_string(cells.size()));
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const auto v = detail::parse_double(cells[j]);
      if (!v) r.fail(what, "not a number: '" + std::string(cells[j]) + "'");
      m(t, j) = *v;
    }
  }
}

}  // namespace

Dataset read_dataset(const std::filesystem::path& path) {
  LineReader r(path);
  std::string line = r.expect_line("format tag");
  if (line != kDatasetTag) r.fail("format tag", "expected '" + std::string(kDatasetTag) + "', got '" + line + "'");
  const std::size_t t_len = read_count(r, "length", true);
  const std::size_t d = read_count(r, "features", true);
  Dataset data;
  line = r.expect_line("task");
  try {
    data.task = parse_task(r.expect_key(line, "task"));
  } catch (const ConfigError& e) {
    r.fail("task", e.what());
  }
  const std::size_t count = read_count(r, "samples", true);
  if (count > 0 && (t_len == 0 || d == 0)) r.fail("length", "zero-sized samples");
  line = r.expect_line("fields");
  bool has_mask = false, has_label = false, has_flags = false;
  {
    const auto parts = detail::split(line, ' ');
    if (parts.front() != "fields") r.fail("fields", "expected 'fields', got '" + line + "'");
    for (std::size_t i = 1; i < parts.size(); ++i) {
      if (parts[i] == "mask") has_mask = true;
      else if (parts[i] == "label") has_label = true;
      else if (parts[i] == "flags") has_flags = true;
      else if (!parts[i].empty()) r.fail("fields", "unknown field '" + std::string(parts[i]) + "'");
    }
  }

  data.samples.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    line = r.expect_line("sample");
    const auto idx = detail::parse_int<std::size_t>(r.expect_key(line, "sample"));
    if (!idx || *idx != n) r.fail("sample", "expected record " + std::to_string(n));
    SeriesSample s;
    line = r.expect_line("lags");
    try {
      s.planted_lags = parse_planted_lags(r.expect_key(line, "lags"));
    } catch (const ConfigError& e) {
      r.fail("lags", e.what());
    }
    if (has_label) {
      line = r.expect_line("label");
      const auto y = detail::parse_int<int>(r.expect_key(line, "label"));
      if (!y) r.fail("label", "expected an integer");
      s.label = *y;
    }
    line = r.expect_line("values");
    if (line != "values") r.fail("values", "expected 'values', got '" + line + "'");
    s.values = Matrix(t_len, d);
    read_rows(r, "values", s.values);
    if (has_mask) {
      line = r.expect_line("mask");
      if (line != "mask") r.fail("mask", "expected 'mask', got '" + line + "'");
      Matrix mask(t_len, d);
      read_rows(r, "mask", mask);
      s.mask = std::move(mask);
    }
    if (has_flags) {
      line = r.expect_line("flags");
      const auto cells = detail::split(r.expect_key(line, "flags"), ',');
      if (cells.size() != t_len) r.fail("flags", "expected " + std::to_string(t_len) + " flags");
      std::vector<int> flags(t_len);
      for (std::size_t t = 0; t < t_len; ++t) {
        const auto v = detail::parse_int<int>(cells[t]);
        if (!v || (*v != 0 && *v != 1)) r.fail("flags", "flags must be 0 or 1");
        flags[t] = *v;
      }
      s.anomaly_flags = std::move(flags);
    }
    data.samples.push_back(std::move(s));
  }
  if (r.next(line) && !detail::trim(line).empty()) r.fail("samples", "trailing content after the last record");
  return data;
}

std::filesystem::path split_path(const std::filesystem::path& base, std::string_view split) {
  std::filesystem::path p = base;
  p += ".";
  p += std::string(split);
  return p;
}

void write_splits(const std::filesystem::path& base, const DatasetSplits& splits) {
  write_dataset(split_path(base, "train"), splits.train);
  write_dataset(split_path(base, "val"), splits.val);
  write_dataset(split_path(base, "test"), splits.test);
}

DatasetSplits read_splits(const std::filesystem::path& base) {
  return {read_dataset(split_path(base, "train")), read_dataset(split_path(base, "val")),
          read_dataset(split_path(base, "test"))};
}

LagSelection recover_lags(const std::vector<SeriesSample>& samples, double lambda, int c,
                          LagPath path) {
  if (samples.empty()) throw DegenerateError("recover_lags: no samples");
  const std::size_t t_len = samples.front().values.rows();
  RawLagScores total{std::vector<double>(t_len, 0.0), std::vector<double>(t_len, 0.0)};
  for (const SeriesSample& s : samples) {
    if (s.values.rows() != t_len) throw ShapeError("recover_lags: samples differ in length");
    const Matrix x = l2_normalize_cols(s.values);
    const LagScoreVector sc = compute_lag_scores(x, x, 0.5, path);
    for (std::size_t l = 0; l < t_len; ++l) {
      total.diag[l] += sc.diag[l];
      total.nondiag[l] += sc.nondiag[l];
    }
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (std::size_t l = 0; l < t_len; ++l) {
    total.diag[l] *= inv;
    total.nondiag[l] *= inv;
  }
  return topk_lags(score_lags(total, lambda), c, t_len);
}

}  // namespace cab
