#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cab/matrix.hpp"

// Lagged cross-covariance between normalized queries and keys, lag scoring,
// and TopK lag selection.
namespace cab {

// stack[l] = roll(k_hat, l)ᵀ · q_hat, a d×d matrix for every lag l in [0, T).
using CovarianceStack = std::vector<Matrix>;

// Per-lag sums of absolute diagonal and off-diagonal entries of stack[l].
struct RawLagScores {
  std::vector<double> diag;
  std::vector<double> nondiag;
};

struct LagScoreVector {
  std::vector<double> diag;
  std::vector<double> nondiag;
  std::vector<double> combined;  // λ·diag + (1-λ)·nondiag
  double lambda = 0.5;

  std::size_t length() const { return combined.size(); }
};

struct LagSelection {
  std::vector<std::size_t> lags;  // distinct, in [1, T-1], by descending combined score
  std::vector<double> scores;     // combined score of each selected lag
  std::size_t k = 0;
  int c = 1;
};

enum class LagPath { fft, naive };

/// Reference implementation: one rolled product per lag, O(d²T²).
CovarianceStack xcorr_all_lags_naive(const Matrix& q_hat, const Matrix& k_hat);

struct FftXcorrOptions {
  // Also return every per-lag matrix instead of only the streamed scores.
  bool materialize_stack = false;
  // Worker count over (i, j) feature pairs. Results are bitwise reproducible
  // for a fixed count; different counts agree to ~1e-12.
  int threads = 1;
};

struct FftXcorrResult {
  RawLagScores scores;
  std::optional<CovarianceStack> stack;
};

/// All-lags cross-covariance through the cross-correlation theorem: one real
/// FFT per column, a conjugated spectral product and one inverse FFT per
/// (i, j) pair. O(d²T log T). Requires T >= 2.
FftXcorrResult xcorr_all_lags_fft(const Matrix& q_hat, const Matrix& k_hat,
                                  const FftXcorrOptions& options = {});

RawLagScores raw_lag_scores(const CovarianceStack& stack);

LagScoreVector score_lags(const RawLagScores& raw, double lambda);
LagScoreVector score_lags(const CovarianceStack& stack, double lambda);

// Scores over every lag using the requested path.
LagScoreVector compute_lag_scores(const Matrix& q_hat, const Matrix& k_hat, double lambda,
                                  LagPath path, int threads = 1);

// k = c·⌈ln T⌉ clamped to [1, T-1].
std::size_t lag_count(std::size_t t_len, int c);

/// Picks the k lags in [1, T-1] with the highest combined score. Equal scores
/// resolve toward the smaller lag, so selection is deterministic.
LagSelection topk_lags(const LagScoreVector& scores, int c, std::size_t t_len);

}  // namespace cab
