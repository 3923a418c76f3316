#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cab/matrix.hpp"
#include "cab/numerics.hpp"
#include "cab/xcorr.hpp"

namespace cab {

// ---------------------------------------------------------------------------
// Temporal attention
// ---------------------------------------------------------------------------

struct TemporalCache {
  Matrix q, k, v;
  Matrix scores;  // pre-softmax logits without the 1/√d_k factor and shift
  Matrix attn;    // row-stochastic T×T weights
  double xi = 1.0;
};

struct TemporalGrads {
  Matrix dq, dk, dv;
  double dxi = 0.0;
  Matrix ddelta;  // 1×T, empty for plain self-attention
};

/// softmax_rows(Q·Kᵀ/√d_k)·V. Each output row is a convex combination of V's rows.
Matrix self_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                      TemporalCache* cache = nullptr);
TemporalGrads self_attention_backward(const TemporalCache& cache, const Matrix& dout);

/// softmax_rows((ξ·Q′K′ᵀ + 1Δᵀ)/√d_k)·V′ with ξ > 0 and Δ a 1×T row.
Matrix destationary_attention(const Matrix& q, const Matrix& k, const Matrix& v, double xi,
                              const Matrix& delta, TemporalCache* cache = nullptr);
TemporalGrads destationary_attention_backward(const TemporalCache& cache, const Matrix& dout);

// ---------------------------------------------------------------------------
// Correlated attention
// ---------------------------------------------------------------------------

enum class LambdaMode { fixed, learnable };

// Learnable CAB scalars in unconstrained form: λ = sigmoid(lambda_raw),
// β = sigmoid(beta_raw), τ = softplus(tau_raw). Defaults decode to
// λ = β = 1/2 and τ = 1.
struct CabParams {
  double lambda_raw = 0.0;
  double beta_raw = 0.0;
  double tau_raw = softplus_inverse(1.0);
  int c = 1;
  // Learnable λ enables soft-score weighting of the selected lags, which is
  // the only path through which λ receives a gradient.
  LambdaMode lambda_mode = LambdaMode::fixed;
  // Disabled filtering keeps only the instantaneous term (β decodes to 0).
  bool filtering = true;
  // Pins β to an exact value; beta_raw then receives no gradient.
  std::optional<double> beta_override;

  double lambda() const { return sigmoid(lambda_raw); }
  double beta() const;
  double tau() const { return softplus(tau_raw); }
  bool operator==(const CabParams&) const = default;
};

struct CabOptions {
  LagPath lag_path = LagPath::fft;
  int threads = 1;
  // Reuses a previous selection instead of recomputing it.
  const LagSelection* frozen_selection = nullptr;
};

struct CabCache {
  Matrix q, k, v;
  Matrix q_hat, k_hat;
  LagSelection selection;
  std::vector<std::size_t> lags;  // 0 followed by the selected lags
  std::vector<Matrix> cov;        // roll(K̂, l)ᵀ·Q̂ per entry of `lags`
  std::vector<Matrix> weights;    // softmax_cols(cov / τ)
  std::vector<Matrix> terms;      // roll(V, l)·weights
  std::vector<double> lag_weights;  // multiplier on each lagged term (1 unless soft)
  double lambda = 0.5, beta = 0.5, tau = 1.0;
};

struct CabGrads {
  Matrix dq, dk, dv;
  double dlambda_raw = 0.0;
  double dbeta_raw = 0.0;
  double dtau_raw = 0.0;
};

/// Correlated attention over the feature axis:
///   Q̂, K̂ = column-normalized Q, K
///   l₁..l_k = TopK lags of λ·DIAG + (1-λ)·OFFDIAG of roll(K̂, l)ᵀQ̂
///   out = (1-β)·V·softmax_cols(K̂ᵀQ̂, τ) + β·Σᵢ roll(V, lᵢ)·softmax_cols(roll(K̂, lᵢ)ᵀQ̂, τ)
/// Q, K, V are T×d_k with T >= 2.
Matrix correlated_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                            const CabParams& params, const CabOptions& options = {},
                            CabCache* cache = nullptr);

// Selection is treated as constant; gradients flow through the recomputed
// lag matrices of the selected lags only.
CabGrads correlated_attention_backward(const CabCache& cache, const CabParams& params,
                                       const Matrix& dout);

// ---------------------------------------------------------------------------
// Mixture-of-head attention
// ---------------------------------------------------------------------------

enum class TemporalKind { self_attention, destationary };
enum class HeadKind { temporal, correlated };

struct HeadParams {
  Matrix w_q, w_k, w_v;  // d_model×d_k each
  HeadKind kind = HeadKind::temporal;
  CabParams cab;  // used by correlated heads only
};

struct MixtureConfig {
  std::size_t h = 16;
  std::size_t m = 8;  // heads [0, m) are temporal, [m, h) correlated
  std::size_t d_model = 64;
  std::size_t d_k = 4;
  TemporalKind temporal = TemporalKind::self_attention;
};

// De-stationary factors shared by every temporal head.
struct DestatFactors {
  double xi = 1.0;
  Matrix delta;  // 1×T
};

struct MixtureOptions {
  CabOptions cab;
  // Per-head frozen selections, indexed by head; entries for temporal heads
  // are ignored.
  const std::vector<LagSelection>* frozen_selections = nullptr;
};

struct HeadCache {
  Matrix q, k, v;
  TemporalCache temporal;
  CabCache correlated;
};

struct MixtureCache {
  Matrix x;
  std::vector<HeadCache> heads;
  Matrix concat;  // T×(h·d_k)
};

struct HeadGrads {
  Matrix dw_q, dw_k, dw_v;
  double dlambda_raw = 0.0, dbeta_raw = 0.0, dtau_raw = 0.0;
};

struct MixtureGrads {
  Matrix dx;
  Matrix dw_o;
  std::vector<HeadGrads> heads;
  double dxi = 0.0;
  Matrix ddelta;
};

// Throws ConfigError when the heads do not match cfg (count, kinds, shapes).
void validate_mixture(const MixtureConfig& cfg, const std::vector<HeadParams>& heads,
                      const Matrix& w_o);

/// Concat(head₁..head_h)·W_O where head i is temporal for i < m and
/// correlated otherwise.
Matrix mixture_of_head(const Matrix& x, const MixtureConfig& cfg,
                       const std::vector<HeadParams>& heads, const Matrix& w_o,
                       const DestatFactors* destat = nullptr, const MixtureOptions& options = {},
                       MixtureCache* cache = nullptr);

MixtureGrads mixture_of_head_backward(const MixtureCache& cache, const MixtureConfig& cfg,
                                      const std::vector<HeadParams>& heads, const Matrix& w_o,
                                      const DestatFactors* destat, const Matrix& dout);

/// Plain multi-head attention: every head uses the temporal mechanism.
Matrix multi_head_attention(const Matrix& x, const std::vector<HeadParams>& heads,
                            const Matrix& w_o, TemporalKind temporal,
                            const DestatFactors* destat = nullptr);

}  // namespace cab
