#include "cab/xcorr.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

#include "cab/errors.hpp"
#include "cab/numerics.hpp"

namespace cab {

namespace {

using Complex = std::complex<double>;

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
};
using PlanPtr = std::unique_ptr<fftw_plan_s, PlanDeleter>;

struct RealPlans {
  PlanPtr forward;
  PlanPtr inverse;
};

// FFTW planning is not thread-safe; execution through the new-array interface
// is. Plans are made unaligned so they accept any std::vector buffer.
const RealPlans& plans_for(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, RealPlans> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> real(n);
  std::vector<Complex> spec(n / 2 + 1);
  auto* cspec = reinterpret_cast<fftw_complex*>(spec.data());
  const int len = static_cast<int>(n);
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  RealPlans plans{PlanPtr(fftw_plan_dft_r2c_1d(len, real.data(), cspec, flags)),
                  PlanPtr(fftw_plan_dft_c2r_1d(len, cspec, real.data(), flags))};
  if (!plans.forward || !plans.inverse) throw Error("FFTW failed to plan length " + std::to_string(n));
  return cache.emplace(n, std::move(plans)).first->second;
}

void require_pair_shapes(const Matrix& q_hat, const Matrix& k_hat, const char* op) {
  if (!q_hat.same_shape(k_hat)) {
    throw ShapeError(std::string(op) + ": q_hat " + q_hat.shape_string() + " and k_hat " +
                     k_hat.shape_string() + " must share a shape");
  }
}

// Spectrum of every column, stored column after column.
std::vector<Complex> column_spectra(const Matrix& m, const RealPlans& plans) {
  const std::size_t t_len = m.rows();
  const std::size_t nfreq = t_len / 2 + 1;
  std::vector<Complex> spectra(m.cols() * nfreq);
  std::vector<double> column(t_len);
  for (std::size_t j = 0; j < m.cols(); ++j) {
    for (std::size_t t = 0; t < t_len; ++t) column[t] = m(t, j);
    fftw_execute_dft_r2c(plans.forward.get(), column.data(),
                         reinterpret_cast<fftw_complex*>(spectra.data() + j * nfreq));
  }
  return spectra;
}

}  // namespace

CovarianceStack xcorr_all_lags_naive(const Matrix& q_hat, const Matrix& k_hat) {
  require_pair_shapes(q_hat, k_hat, "xcorr_all_lags_naive");
  CovarianceStack stack;
  stack.reserve(q_hat.rows());
  for (std::size_t l = 0; l < q_hat.rows(); ++l) stack.push_back(matmul_tn(roll(k_hat, l), q_hat));
  return stack;
}

FftXcorrResult xcorr_all_lags_fft(const Matrix& q_hat, const Matrix& k_hat,
                                  const FftXcorrOptions& options) {
  require_pair_shapes(q_hat, k_hat, "xcorr_all_lags_fft");
  const std::size_t t_len = q_hat.rows();
  const std::size_t d = q_hat.cols();
  if (t_len < 2) throw DegenerateError("xcorr_all_lags_fft needs T >= 2, got T = " + std::to_string(t_len));

  const RealPlans& plans = plans_for(t_len);
  const std::size_t nfreq = t_len / 2 + 1;
  const std::vector<Complex> k_spec = column_spectra(k_hat, plans);
  const std::vector<Complex> q_spec = column_spectra(q_hat, plans);

  FftXcorrResult result;
  if (options.materialize_stack) result.stack.emplace(t_len, Matrix(d, d));

  const std::size_t pair_count = d * d;
  const std::size_t workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.threads, 1)), 1, pair_count);
  std::vector<RawLagScores> partial(workers, RawLagScores{std::vector<double>(t_len, 0.0),
                                                          std::vector<double>(t_len, 0.0)});
  const double inv_len = 1.0 / static_cast<double>(t_len);

  auto run_pairs = [&](std::size_t worker, std::size_t begin, std::size_t end) {
    std::vector<Complex> product(nfreq);
    std::vector<double> corr(t_len);
    RawLagScores& acc = partial[worker];
    for (std::size_t p = begin; p < end; ++p) {
      const std::size_t i = p / d;
      const std::size_t j = p % d;
      const Complex* ki = k_spec.data() + i * nfreq;
      const Complex* qj = q_spec.data() + j * nfreq;
      // Σ_s k_i(s)·q_j(s + l) has spectrum conj(K_i)·Q_j.
      for (std::size_t f = 0; f < nfreq; ++f) product[f] = std::conj(ki[f]) * qj[f];
      fftw_execute_dft_c2r(plans.inverse.get(), reinterpret_cast<fftw_complex*>(product.data()),
                           corr.data());
      std::vector<double>& target = (i == j) ? acc.diag : acc.nondiag;
      for (std::size_t l = 0; l < t_len; ++l) {
        const double v = corr[l] * inv_len;
        target[l] += std::abs(v);
        if (result.stack) (*result.stack)[l](i, j) = v;
      }
    }
  };

  if (workers == 1) {
    run_pairs(0, 0, pair_count);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (pair_count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(pair_count, begin + chunk);
      if (begin < end) pool.emplace_back(run_pairs, w, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  result.scores = std::move(partial[0]);
  for (std::size_t w = 1; w < workers; ++w) {
    for (std::size_t l = 0; l < t_len; ++l) {
      result.scores.diag[l] += partial[w].diag[l];
      result.scores.nondiag[l] += partial[w].nondiag[l];
    }
  }
  return result;
}

RawLagScores raw_lag_scores(const CovarianceStack& stack) {
  RawLagScores raw{std::vector<double>(stack.size(), 0.0), std::vector<double>(stack.size(), 0.0)};
  for (std::size_t l = 0; l < stack.size(); ++l) {
    const Matrix& m = stack[l];
    if (m.rows() != m.cols()) throw ShapeError("lag matrix must be square, got " + m.shape_string());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) {
        (i == j ? raw.diag : raw.nondiag)[l] += std::abs(m(i, j));
      }
    }
  }
  return raw;
}

LagScoreVector score_lags(const RawLagScores& raw, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (raw.diag.size() != raw.nondiag.size()) throw ShapeError("score_lags: ragged raw scores");
  LagScoreVector out{raw.diag, raw.nondiag, std::vector<double>(raw.diag.size()), lambda};
  for (std::size_t l = 0; l < out.combined.size(); ++l)
    out.combined[l] = lambda * raw.diag[l] + (1.0 - lambda) * raw.nondiag[l];
  return out;
}

LagScoreVector score_lags(const CovarianceStack& stack, double lambda) {
  return score_lags(raw_lag_scores(stack), lambda);
}

LagScoreVector compute_lag_scores(const Matrix& q_hat, const Matrix& k_hat, double lambda,
                                  LagPath path, int threads) {
  if (path == LagPath::naive) return score_lags(xcorr_all_lags_naive(q_hat, k_hat), lambda);
  FftXcorrOptions options;
  options.threads = threads;
  return score_lags(xcorr_all_lags_fft(q_hat, k_hat, options).scores, lambda);
}

std::size_t lag_count(std::size_t t_len, int c) {
  if (t_len < 2) throw DegenerateError("lag selection needs T >= 2");
  if (c < 1) throw ParameterError("lag multiplier c must be >= 1, got " + std::to_string(c));
  const auto ceil_log = static_cast<std::size_t>(std::ceil(std::log(static_cast<double>(t_len))));
  return std::clamp<std::size_t>(static_cast<std::size_t>(c) * ceil_log, 1, t_len - 1);
}

LagSelection topk_lags(const LagScoreVector& scores, int c, std::size_t t_len) {
  if (scores.length() != t_len) {
    throw ShapeError("topk_lags: " + std::to_string(scores.length()) + " scores for T = " +
                     std::to_string(t_len));
  }
  const std::size_t k = lag_count(t_len, c);
  std::vector<std::size_t> candidates(t_len - 1);
  std::iota(candidates.begin(), candidates.end(), std::size_t{1});
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                    candidates.end(), [&](std::size_t a, std::size_t b) {
                      if (scores.combined[a] != scores.combined[b])
                        return scores.combined[a] > scores.combined[b];
                      return a < b;
                    });
  LagSelection sel;
  sel.k = k;
  sel.c = c;
  sel.lags.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t l : sel.lags) sel.scores.push_back(scores.combined[l]);
  return sel;
}

}  // namespace cab
