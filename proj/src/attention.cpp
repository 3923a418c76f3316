#include "cab/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cab/errors.hpp"

namespace cab {

// ---------------------------------------------------------------------------
// Temporal attention
// ---------------------------------------------------------------------------

namespace {

void require_qkv(const Matrix& q, const Matrix& k, const Matrix& v, const char* op) {
  if (q.cols() != k.cols() || q.rows() != k.rows() || k.rows() != v.rows()) {
    throw ShapeError(std::string(op) + ": inconsistent shapes q " + q.shape_string() + ", k " +
                     k.shape_string() + ", v " + v.shape_string());
  }
}

double inv_sqrt_dk(const Matrix& q) { return 1.0 / std::sqrt(static_cast<double>(q.cols())); }

// Shared tail of both temporal mechanisms: given d(out), return d(pre-scale
// logits) along with dv.
Matrix temporal_logit_grad(const TemporalCache& cache, const Matrix& dout, Matrix& dv) {
  dv = matmul_tn(cache.attn, dout);
  const Matrix dattn = matmul_nt(dout, cache.v);
  Matrix dlogits = softmax_rows_backward(cache.attn, dattn);
  dlogits *= inv_sqrt_dk(cache.q);
  return dlogits;
}

}  // namespace

Matrix self_attention(const Matrix& q, const Matrix& k, const Matrix& v, TemporalCache* cache) {
  require_qkv(q, k, v, "self_attention");
  Matrix scores = matmul_nt(q, k);
  Matrix attn = softmax_rows(scores * inv_sqrt_dk(q));
  Matrix out = matmul(attn, v);
  if (cache) *cache = TemporalCache{q, k, v, std::move(scores), std::move(attn), 1.0};
  return out;
}

TemporalGrads self_attention_backward(const TemporalCache& cache, const Matrix& dout) {
  TemporalGrads g;
  const Matrix dscores = temporal_logit_grad(cache, dout, g.dv);
  g.dq = matmul(dscores, cache.k);
  g.dk = matmul_tn(dscores, cache.q);
  return g;
}

Matrix destationary_attention(const Matrix& q, const Matrix& k, const Matrix& v, double xi,
                              const Matrix& delta, TemporalCache* cache) {
  require_qkv(q, k, v, "destationary_attention");
  if (!(xi > 0.0) || !std::isfinite(xi)) {
    throw ParameterError("de-stationary scale xi must be positive, got " + std::to_string(xi));
  }
  if (delta.rows() != 1 || delta.cols() != k.rows()) {
    throw ShapeError("destationary_attention: delta " + delta.shape_string() + " for T = " +
                     std::to_string(k.rows()));
  }
  Matrix scores = matmul_nt(q, k);
  Matrix logits = add_row_bias(scores * xi, delta);
  Matrix attn = softmax_rows(logits * inv_sqrt_dk(q));
  Matrix out = matmul(attn, v);
  if (cache) *cache = TemporalCache{q, k, v, std::move(scores), std::move(attn), xi};
  return out;
}

TemporalGrads destationary_attention_backward(const TemporalCache& cache, const Matrix& dout) {
  TemporalGrads g;
  const Matrix dpre = temporal_logit_grad(cache, dout, g.dv);
  g.dxi = sum(hadamard(dpre, cache.scores));
  g.ddelta = column_sums(dpre);
  const Matrix dscores = dpre * cache.xi;
  g.dq = matmul(dscores, cache.k);
  g.dk = matmul_tn(dscores, cache.q);
  return g;
}

// ---------------------------------------------------------------------------
// Correlated attention
// ---------------------------------------------------------------------------

double CabParams::beta() const {
  if (!filtering) return 0.0;
  if (beta_override) return *beta_override;
  return sigmoid(beta_raw);
}

namespace {

struct DiagSplit {
  double diag = 0.0;
  double nondiag = 0.0;
};

DiagSplit split_abs(const Matrix& m) {
  DiagSplit s;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) (i == j ? s.diag : s.nondiag) += std::abs(m(i, j));
  return s;
}

double sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

Matrix correlated_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                            const CabParams& params, const CabOptions& options, CabCache* cache) {
  if (!q.same_shape(k) || !q.same_shape(v)) {
    throw ShapeError("correlated_attention: q " + q.shape_string() + ", k " + k.shape_string() +
                     ", v " + v.shape_string() + " must share a shape");
  }
  const std::size_t t_len = q.rows();
  if (t_len < 2) throw DegenerateError("correlated_attention needs T >= 2");

  CabCache local;
  CabCache& c = cache ? *cache : local;
  c.q = q;
  c.k = k;
  c.v = v;
  c.q_hat = l2_normalize_cols(q);
  c.k_hat = l2_normalize_cols(k);
  c.lambda = params.lambda();
  c.beta = params.beta();
  c.tau = params.tau();

  c.selection = LagSelection{};
  if (params.filtering) {
    if (options.frozen_selection) {
      c.selection = *options.frozen_selection;
    } else {
      const LagScoreVector scores =
          compute_lag_scores(c.q_hat, c.k_hat, c.lambda, options.lag_path, options.threads);
      c.selection = topk_lags(scores, params.c, t_len);
    }
  }

  c.lags.assign(1, 0);
  c.lags.insert(c.lags.end(), c.selection.lags.begin(), c.selection.lags.end());
  c.cov.clear();
  c.weights.clear();
  c.terms.clear();
  for (std::size_t lag : c.lags) {
    c.cov.push_back(matmul_tn(roll(c.k_hat, lag), c.q_hat));
    c.weights.push_back(softmax_cols(c.cov.back(), c.tau));
    c.terms.push_back(matmul(roll(v, lag), c.weights.back()));
  }

  const std::size_t n_lagged = c.lags.size() - 1;
  c.lag_weights.assign(n_lagged, 1.0);
  if (params.lambda_mode == LambdaMode::learnable && n_lagged > 0) {
    // k·softmax of the selected lags' combined scores; uniform scores give 1
    std::vector<double> s(n_lagged);
    double mx = -INFINITY;
    for (std::size_t i = 0; i < n_lagged; ++i) {
      const DiagSplit split = split_abs(c.cov[i + 1]);
      s[i] = c.lambda * split.diag + (1.0 - c.lambda) * split.nondiag;
      mx = std::max(mx, s[i]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n_lagged; ++i) total += (s[i] = std::exp(s[i] - mx));
    for (std::size_t i = 0; i < n_lagged; ++i)
      c.lag_weights[i] = static_cast<double>(n_lagged) * s[i] / total;
  }

  Matrix out = c.terms[0] * (1.0 - c.beta);
  if (n_lagged > 0) {
    Matrix lagged(t_len, q.cols());
    for (std::size_t i = 0; i < n_lagged; ++i) lagged += c.terms[i + 1] * c.lag_weights[i];
    out += lagged * c.beta;
  }
  return out;
}

CabGrads correlated_attention_backward(const CabCache& c, const CabParams& params,
                                       const Matrix& dout) {
  require_same_shape(c.v, dout, "correlated_attention_backward");
  const std::size_t t_len = c.q.rows();
  const std::size_t d = c.q.cols();
  const std::size_t n_lagged = c.lags.size() - 1;
  const bool soft = params.lambda_mode == LambdaMode::learnable && n_lagged > 0;

  CabGrads g{Matrix(t_len, d), Matrix(t_len, d), Matrix(t_len, d)};
  Matrix dq_hat(t_len, d);
  Matrix dk_hat(t_len, d);

  // β
  if (params.filtering && !params.beta_override && n_lagged > 0) {
    double dbeta = 0.0;
    for (std::size_t i = 0; i < n_lagged; ++i)
      dbeta += c.lag_weights[i] * sum(hadamard(dout, c.terms[i + 1]));
    dbeta -= sum(hadamard(dout, c.terms[0]));
    g.dbeta_raw = dbeta * c.beta * (1.0 - c.beta);
  }

  // soft-score weights: w = n·softmax(s), s_i = λ·DIAG_i + (1-λ)·OFFDIAG_i
  std::vector<double> dscore(n_lagged, 0.0);
  if (soft) {
    const double n = static_cast<double>(n_lagged);
    std::vector<double> dp(n_lagged);
    double dot = 0.0;
    for (std::size_t i = 0; i < n_lagged; ++i) {
      const double dw = c.beta * sum(hadamard(dout, c.terms[i + 1]));
      dp[i] = n * dw;
      dot += (c.lag_weights[i] / n) * dp[i];
    }
    double dlambda = 0.0;
    for (std::size_t i = 0; i < n_lagged; ++i) {
      const double p = c.lag_weights[i] / n;
      dscore[i] = p * (dp[i] - dot);
      const DiagSplit split = split_abs(c.cov[i + 1]);
      dlambda += dscore[i] * (split.diag - split.nondiag);
    }
    g.dlambda_raw = dlambda * c.lambda * (1.0 - c.lambda);
  }

  double dtau = 0.0;
  for (std::size_t e = 0; e < c.lags.size(); ++e) {
    const std::size_t lag = c.lags[e];
    const double coeff = e == 0 ? 1.0 - c.beta : c.beta * c.lag_weights[e - 1];
    const Matrix dterm = dout * coeff;
    const Matrix rolled_v = roll(c.v, lag);
    const Matrix dweights = matmul_tn(rolled_v, dterm);
    g.dv += roll_backward(matmul_nt(dterm, c.weights[e]), lag);

    SoftmaxAdjoint sm = softmax_cols_backward(c.cov[e], c.weights[e], dweights, c.tau);
    dtau += sm.dtemperature;
    Matrix& dcov = sm.da;
    if (soft && e > 0) {
      const Matrix& cov = c.cov[e];
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
          dcov(a, b) += dscore[e - 1] * (a == b ? c.lambda : 1.0 - c.lambda) * sign(cov(a, b));
    }
    const Matrix rolled_k = roll(c.k_hat, lag);
    dq_hat += matmul(rolled_k, dcov);
    dk_hat += roll_backward(matmul_nt(c.q_hat, dcov), lag);
  }

  g.dq = l2_normalize_cols_backward(c.q, c.q_hat, dq_hat);
  g.dk = l2_normalize_cols_backward(c.k, c.k_hat, dk_hat);
  g.dtau_raw = dtau * sigmoid(params.tau_raw);
  return g;
}

// ---------------------------------------------------------------------------
// Mixture-of-head attention
// ---------------------------------------------------------------------------

void validate_mixture(const MixtureConfig& cfg, const std::vector<HeadParams>& heads,
                      const Matrix& w_o) {
  if (cfg.m > cfg.h) {
    throw ConfigError("temporal head count m = " + std::to_string(cfg.m) + " exceeds h = " +
                      std::to_string(cfg.h));
  }
  if (heads.size() != cfg.h) {
    throw ConfigError("expected " + std::to_string(cfg.h) + " heads, got " +
                      std::to_string(heads.size()));
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const HeadParams& hp = heads[i];
    const HeadKind want = i < cfg.m ? HeadKind::temporal : HeadKind::correlated;
    if (hp.kind != want) {
      throw ConfigError("head " + std::to_string(i) + " has the wrong kind for m = " +
                        std::to_string(cfg.m));
    }
    for (const Matrix* w : {&hp.w_q, &hp.w_k, &hp.w_v}) {
      if (w->rows() != cfg.d_model || w->cols() != cfg.d_k) {
        throw ConfigError("head " + std::to_string(i) + " projection is " + w->shape_string() +
                          ", expected " + std::to_string(cfg.d_model) + "x" +
                          std::to_string(cfg.d_k));
      }
    }
  }
  if (w_o.rows() != cfg.h * cfg.d_k || w_o.cols() != cfg.d_model) {
    throw ConfigError("output projection is " + w_o.shape_string() + ", expected " +
                      std::to_string(cfg.h * cfg.d_k) + "x" + std::to_string(cfg.d_model));
  }
}

namespace {

Matrix run_temporal(const Matrix& q, const Matrix& k, const Matrix& v, TemporalKind kind,
                    const DestatFactors* destat, TemporalCache* cache) {
  if (kind == TemporalKind::self_attention) return self_attention(q, k, v, cache);
  if (!destat) throw ConfigError("de-stationary heads need xi and delta factors");
  return destationary_attention(q, k, v, destat->xi, destat->delta, cache);
}

void place_columns(Matrix& dst, const Matrix& src, std::size_t offset) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(r, offset + c) = src(r, c);
}

Matrix take_columns(const Matrix& src, std::size_t offset, std::size_t width) {
  Matrix out(src.rows(), width);
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = src(r, offset + c);
  return out;
}

}  // namespace

Matrix mixture_of_head(const Matrix& x, const MixtureConfig& cfg,
                       const std::vector<HeadParams>& heads, const Matrix& w_o,
                       const DestatFactors* destat, const MixtureOptions& options,
                       MixtureCache* cache) {
  validate_mixture(cfg, heads, w_o);
  if (x.cols() != cfg.d_model) {
    throw ShapeError("mixture_of_head: input " + x.shape_string() + " for d_model = " +
                     std::to_string(cfg.d_model));
  }
  if (options.frozen_selections && options.frozen_selections->size() != cfg.h) {
    throw ConfigError("frozen selections must have one entry per head");
  }
  Matrix concat(x.rows(), cfg.h * cfg.d_k);
  std::vector<HeadCache> head_caches(cache ? cfg.h : 0);
  for (std::size_t i = 0; i < cfg.h; ++i) {
    const HeadParams& hp = heads[i];
    HeadCache local;
    HeadCache& hc = cache ? head_caches[i] : local;
    hc.q = matmul(x, hp.w_q);
    hc.k = matmul(x, hp.w_k);
    hc.v = matmul(x, hp.w_v);
    Matrix out;
    if (hp.kind == HeadKind::temporal) {
      out = run_temporal(hc.q, hc.k, hc.v, cfg.temporal, destat, cache ? &hc.temporal : nullptr);
    } else {
      CabOptions cab_opts = options.cab;
      if (options.frozen_selections) cab_opts.frozen_selection = &(*options.frozen_selections)[i];
      out = correlated_attention(hc.q, hc.k, hc.v, hp.cab, cab_opts,
                                 cache ? &hc.correlated : nullptr);
    }
    place_columns(concat, out, i * cfg.d_k);
  }
  Matrix result = matmul(concat, w_o);
  if (cache) *cache = MixtureCache{x, std::move(head_caches), std::move(concat)};
  return result;
}

MixtureGrads mixture_of_head_backward(const MixtureCache& cache, const MixtureConfig& cfg,
                                      const std::vector<HeadParams>& heads, const Matrix& w_o,
                                      const DestatFactors* destat, const Matrix& dout) {
  MixtureGrads g;
  g.dw_o = matmul_tn(cache.concat, dout);
  const Matrix dconcat = matmul_nt(dout, w_o);
  g.dx = Matrix(cache.x.rows(), cache.x.cols());
  if (destat) g.ddelta = Matrix(1, destat->delta.cols());
  g.heads.resize(cfg.h);
  for (std::size_t i = 0; i < cfg.h; ++i) {
    const HeadParams& hp = heads[i];
    const HeadCache& hc = cache.heads[i];
    const Matrix dhead = take_columns(dconcat, i * cfg.d_k, cfg.d_k);
    Matrix dq, dk, dv;
    HeadGrads& hg = g.heads[i];
    if (hp.kind == HeadKind::temporal) {
      TemporalGrads tg = cfg.temporal == TemporalKind::self_attention
                             ? self_attention_backward(hc.temporal, dhead)
                             : destationary_attention_backward(hc.temporal, dhead);
      dq = std::move(tg.dq);
      dk = std::move(tg.dk);
      dv = std::move(tg.dv);
      if (cfg.temporal == TemporalKind::destationary) {
        g.dxi += tg.dxi;
        g.ddelta += tg.ddelta;
      }
    } else {
      CabGrads cg = correlated_attention_backward(hc.correlated, hp.cab, dhead);
      dq = std::move(cg.dq);
      dk = std::move(cg.dk);
      dv = std::move(cg.dv);
      hg.dlambda_raw = cg.dlambda_raw;
      hg.dbeta_raw = cg.dbeta_raw;
      hg.dtau_raw = cg.dtau_raw;
    }
    hg.dw_q = matmul_tn(cache.x, dq);
    hg.dw_k = matmul_tn(cache.x, dk);
    hg.dw_v = matmul_tn(cache.x, dv);
    g.dx += matmul_nt(dq, hp.w_q);
    g.dx += matmul_nt(dk, hp.w_k);
    g.dx += matmul_nt(dv, hp.w_v);
  }
  return g;
}

Matrix multi_head_attention(const Matrix& x, const std::vector<HeadParams>& heads,
                            const Matrix& w_o, TemporalKind temporal,
                            const DestatFactors* destat) {
  if (heads.empty()) throw ConfigError("multi_head_attention needs at least one head");
  const std::size_t d_k = heads.front().w_q.cols();
  Matrix concat(x.rows(), heads.size() * d_k);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const Matrix q = matmul(x, heads[i].w_q);
    const Matrix k = matmul(x, heads[i].w_k);
    const Matrix v = matmul(x, heads[i].w_v);
    place_columns(concat, run_temporal(q, k, v, temporal, destat, nullptr), i * d_k);
  }
  return matmul(concat, w_o);
}

}  // namespace cab
