#include "cab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cab/errors.hpp"
#include "cab/numerics.hpp"

namespace cab {

std::pair<Matrix, StationaryStats> stationarize(const Matrix& x, const Matrix* mask) {
  if (x.rows() == 0) throw DegenerateError("stationarize: empty series");
  if (mask) require_same_shape(x, *mask, "stationarize");
  const std::size_t t_len = x.rows(), d = x.cols();
  StationaryStats stats{std::vector<double>(d, 0.0), std::vector<double>(d, kSigmaFloor)};
  Matrix out(t_len, d);
  for (std::size_t j = 0; j < d; ++j) {
    double n = 0.0, mean = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (mask && (*mask)(t, j) == 0.0) continue;
      n += 1.0;
      mean += x(t, j);
    }
    if (n == 0.0) continue;  // nothing observed: μ = 0, σ = floor, output stays 0
    mean /= n;
    double var = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (mask && (*mask)(t, j) == 0.0) continue;
      var += (x(t, j) - mean) * (x(t, j) - mean);
    }
    const double sigma = std::max(std::sqrt(var / n), kSigmaFloor);
    stats.mu[j] = mean;
    stats.sigma[j] = sigma;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (mask && (*mask)(t, j) == 0.0) continue;
      out(t, j) = (x(t, j) - mean) / sigma;
    }
  }
  return {std::move(out), std::move(stats)};
}

Matrix destationarize(const Matrix& x, const StationaryStats& stats) {
  if (stats.mu.size() != x.cols() || stats.sigma.size() != x.cols())
    throw ShapeError("destationarize: " + x.shape_string() + " with " +
                     std::to_string(stats.mu.size()) + " feature statistics");
  Matrix out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t j = 0; j < x.cols(); ++j) out(t, j) = x(t, j) * stats.sigma[j] + stats.mu[j];
  return out;
}

std::string_view model_kind_name(ModelKind kind) {
  return kind == ModelKind::transformer ? "transformer" : "nonstationary";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "transformer") return ModelKind::transformer;
  if (name == "nonstationary") return ModelKind::nonstationary;
  throw ConfigError("unknown model '" + std::string(name) + "' (expected transformer or nonstationary)");
}

MixtureConfig ModelConfig::mixture() const {
  return MixtureConfig{heads, temporal_heads, d_model, head_dim(),
                       kind == ModelKind::nonstationary ? TemporalKind::destationary
                                                        : TemporalKind::self_attention};
}

LambdaMode default_lambda_mode(std::size_t d_k) {
  return d_k < 100 ? LambdaMode::fixed : LambdaMode::learnable;
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.seq_len < 2) throw ConfigError("sequence length must be at least 2");
  if (cfg.d_in < 1) throw ConfigError("input width must be at least 1");
  if (cfg.d_model < 1) throw ConfigError("d_model must be at least 1");
  if (cfg.heads < 1) throw ConfigError("head count must be at least 1");
  if (cfg.temporal_heads > cfg.heads)
    throw ConfigError("temporal head count m = " + std::to_string(cfg.temporal_heads) +
                      " exceeds head count h = " + std::to_string(cfg.heads));
  if (cfg.d_k == 0 && cfg.d_model % cfg.heads != 0)
    throw ConfigError("d_model = " + std::to_string(cfg.d_model) + " is not divisible by h = " +
                      std::to_string(cfg.heads) + "; set d_k explicitly");
  if (cfg.head_dim() < 1) throw ConfigError("head width must be at least 1");
  if (cfg.task == Task::classification && cfg.num_classes < 2)
    throw ConfigError("classification needs at least two classes");
  if (cfg.cab.c < 1) throw ConfigError("lag multiplier c must be at least 1");
  if (cfg.threads < 1) throw ConfigError("thread count must be at least 1");
}

namespace {

Matrix init_weight(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(rows)));
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

ProjectorSlots add_projector(ParamSet& set, const std::string& prefix, std::size_t in,
                             std::size_t hidden, std::size_t out, double out_bias,
                             std::mt19937_64& rng) {
  ProjectorSlots p;
  p.w1 = set.add(prefix + ".w1", init_weight(in, hidden, rng));
  p.b1 = set.add(prefix + ".b1", Matrix(1, hidden));
  // Small output weights keep ξ ≈ 1 and Δ ≈ 0 at initialization.
  p.w2 = set.add(prefix + ".w2", init_weight(hidden, out, rng) * 0.1);
  p.b2 = set.add(prefix + ".b2", Matrix(1, out, out_bias));
  return p;
}

Matrix positional_encoding(std::size_t t_len, std::size_t d_model) {
  Matrix pe(t_len, d_model);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
      pe(t, i) = i % 2 == 0 ? std::sin(static_cast<double>(t) * rate)
                            : std::cos(static_cast<double>(t) * rate);
    }
  }
  return pe;
}

Matrix stats_row(const std::vector<double>& v) { return Matrix::row_vector(v); }

struct ProjectorOutput {
  Matrix hidden_pre;
  Matrix out;
};

ProjectorOutput run_projector(const ParamSet& set, const ProjectorSlots& p, const Matrix& in) {
  ProjectorOutput r;
  r.hidden_pre = add_row_bias(matmul(in, set[p.w1].value), set[p.b1].value);
  r.out = add_row_bias(matmul(gelu(r.hidden_pre), set[p.w2].value), set[p.b2].value);
  return r;
}

void projector_backward(ParamSet& set, const ProjectorSlots& p, const Matrix& in,
                        const Matrix& hidden_pre, const Matrix& dout) {
  const Matrix act = gelu(hidden_pre);
  set[p.w2].grad += matmul_tn(act, dout);
  set[p.b2].grad += dout;
  const Matrix dhidden = gelu_backward(hidden_pre, matmul_nt(dout, set[p.w2].value));
  set[p.w1].grad += matmul_tn(in, dhidden);
  set[p.b1].grad += dhidden;
}

std::vector<HeadParams> block_heads(const ModelParams& params, std::size_t b) {
  const ModelConfig& cfg = params.config;
  const BlockSlots& slots = params.blocks[b];
  std::vector<HeadParams> heads(cfg.heads);
  for (std::size_t i = 0; i < cfg.heads; ++i) {
    const HeadSlots& hs = slots.heads[i];
    HeadParams& hp = heads[i];
    hp.w_q = params.set[hs.w_q].value;
    hp.w_k = params.set[hs.w_k].value;
    hp.w_v = params.set[hs.w_v].value;
    hp.kind = i < cfg.temporal_heads ? HeadKind::temporal : HeadKind::correlated;
    hp.cab = cfg.cab;
    if (hs.lambda_raw) hp.cab.lambda_raw = params.set[*hs.lambda_raw].scalar();
    if (hs.beta_raw) hp.cab.beta_raw = params.set[*hs.beta_raw].scalar();
    if (hs.tau_raw) hp.cab.tau_raw = params.set[*hs.tau_raw].scalar();
  }
  return heads;
}

}  // namespace

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.config = cfg;
  const std::size_t dm = cfg.d_model, dk = cfg.head_dim(), dff = cfg.ff_dim();
  p.embed = p.set.add("embed", init_weight(cfg.d_in, dm, rng));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    BlockSlots bs;
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      const std::string hp = prefix + "head" + std::to_string(i) + ".";
      HeadSlots hs;
      hs.w_q = p.set.add(hp + "w_q", init_weight(dm, dk, rng));
      hs.w_k = p.set.add(hp + "w_k", init_weight(dm, dk, rng));
      hs.w_v = p.set.add(hp + "w_v", init_weight(dm, dk, rng));
      if (i >= cfg.temporal_heads) {
        hs.lambda_raw = p.set.add(hp + "lambda_raw", Matrix(1, 1, cfg.cab.lambda_raw),
                                  cfg.cab.lambda_mode == LambdaMode::learnable);
        hs.beta_raw = p.set.add(hp + "beta_raw", Matrix(1, 1, cfg.cab.beta_raw),
                                cfg.learn_beta && cfg.cab.filtering && !cfg.cab.beta_override);
        hs.tau_raw = p.set.add(hp + "tau_raw", Matrix(1, 1, cfg.cab.tau_raw), cfg.learn_tau);
      }
      bs.heads.push_back(hs);
    }
    bs.w_o = p.set.add(prefix + "w_o", init_weight(cfg.heads * dk, dm, rng));
    bs.norm1_gain = p.set.add(prefix + "norm1.gain", Matrix(1, dm, 1.0));
    bs.norm1_bias = p.set.add(prefix + "norm1.bias", Matrix(1, dm));
    bs.ff_w1 = p.set.add(prefix + "ff.w1", init_weight(dm, dff, rng));
    bs.ff_b1 = p.set.add(prefix + "ff.b1", Matrix(1, dff));
    bs.ff_w2 = p.set.add(prefix + "ff.w2", init_weight(dff, dm, rng));
    bs.ff_b2 = p.set.add(prefix + "ff.b2", Matrix(1, dm));
    bs.norm2_gain = p.set.add(prefix + "norm2.gain", Matrix(1, dm, 1.0));
    bs.norm2_bias = p.set.add(prefix + "norm2.bias", Matrix(1, dm));
    p.blocks.push_back(std::move(bs));
  }
  p.head_w = p.set.add("head.w", init_weight(dm, cfg.output_dim(), rng));
  p.head_b = p.set.add("head.b", Matrix(1, cfg.output_dim()));
  if (cfg.kind == ModelKind::nonstationary) {
    p.xi_proj = add_projector(p.set, "destat.xi", cfg.d_in, 2 * dm, 1, softplus_inverse(1.0), rng);
    p.delta_proj = add_projector(p.set, "destat.delta", cfg.d_in, 2 * dm, cfg.seq_len, 0.0, rng);
  }
  return p;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t dm = cfg.d_model, dk = cfg.head_dim(), dff = cfg.ff_dim(), h = cfg.heads;
  const std::size_t di = cfg.d_in, out = cfg.output_dim();
  const std::size_t per_block = 3 * h * dm * dk + h * dk * dm + 3 * (h - cfg.temporal_heads) +
                                4 * dm + 2 * dm * dff + dff + dm;
  std::size_t n = di * dm + cfg.blocks * per_block + dm * out + out;
  if (cfg.kind == ModelKind::nonstationary) {
    n += di * 2 * dm + 2 * dm + 2 * dm + 1;
    n += di * 2 * dm + 2 * dm + 2 * dm * cfg.seq_len + cfg.seq_len;
  }
  return n;
}

Matrix encoder_forward(const ModelParams& params, const Matrix& x_stationary,
                       const DestatFactors* destat, const ForwardOptions& options,
                       ModelCache* cache, SelectionTable* selections) {
  const ModelConfig& cfg = params.config;
  if (x_stationary.cols() != cfg.d_in)
    throw ShapeError("encoder_forward: input " + x_stationary.shape_string() + " for d_in = " +
                     std::to_string(cfg.d_in));
  if (options.frozen && options.frozen->size() != cfg.blocks)
    throw ConfigError("frozen selections must have one entry per block");
  const ParamSet& set = params.set;
  Matrix e = matmul(x_stationary, set[params.embed].value);
  if (cfg.positional_encoding) e += positional_encoding(e.rows(), e.cols());
  const MixtureConfig mix = cfg.mixture();
  if (cache) cache->blocks.assign(cfg.blocks, {});
  if (selections) selections->assign(cfg.blocks, std::vector<LagSelection>(cfg.heads));

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const BlockSlots& bs = params.blocks[b];
    BlockCache local;
    const bool keep = cache || selections;
    BlockCache& bc = cache ? cache->blocks[b] : local;
    MixtureOptions mo;
    mo.cab.lag_path = cfg.lag_path;
    mo.cab.threads = cfg.threads;
    if (options.frozen) mo.frozen_selections = &(*options.frozen)[b];
    const std::vector<HeadParams> heads = block_heads(params, b);
    const Matrix attn = mixture_of_head(e, mix, heads, set[bs.w_o].value, destat, mo,
                                        keep ? &bc.mixture : nullptr);
    if (selections)
      for (std::size_t i = cfg.temporal_heads; i < cfg.heads; ++i)
        (*selections)[b][i] = bc.mixture.heads[i].correlated.selection;
    if (cache) bc.input = e;
    const Matrix e1 = layer_norm(e + attn, set[bs.norm1_gain].value, set[bs.norm1_bias].value,
                                 cache ? &bc.norm1 : nullptr);
    Matrix ff_pre = add_row_bias(matmul(e1, set[bs.ff_w1].value), set[bs.ff_b1].value);
    Matrix ff_act = gelu(ff_pre);
    const Matrix ff = add_row_bias(matmul(ff_act, set[bs.ff_w2].value), set[bs.ff_b2].value);
    e = layer_norm(e1 + ff, set[bs.norm2_gain].value, set[bs.norm2_bias].value,
                   cache ? &bc.norm2 : nullptr);
    if (cache) {
      bc.norm1_out = e1;
      bc.ff_pre = std::move(ff_pre);
      bc.ff_act = std::move(ff_act);
    } else if (selections) {
      bc = BlockCache{};
    }
  }
  if (cache) cache->encoded = e;
  return e;
}

ForwardResult model_forward(const ModelParams& params, const Matrix& x, const Matrix* mask,
                            const ForwardOptions& options, ModelCache* cache) {
  const ModelConfig& cfg = params.config;
  if (x.rows() != cfg.seq_len || x.cols() != cfg.d_in)
    throw ShapeError("model_forward: input " + x.shape_string() + ", expected " +
                     std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.d_in));
  auto [xs, stats] = stationarize(x, mask);
  const ParamSet& set = params.set;

  std::optional<DestatFactors> destat;
  ProjectorOutput xi_out, delta_out;
  if (cfg.kind == ModelKind::nonstationary) {
    xi_out = run_projector(set, *params.xi_proj, stats_row(stats.sigma));
    delta_out = run_projector(set, *params.delta_proj, stats_row(stats.mu));
    destat = DestatFactors{softplus(xi_out.out[0]), delta_out.out};
  }

  ForwardResult result;
  const Matrix encoded = encoder_forward(params, xs, destat ? &*destat : nullptr, options, cache,
                                         &result.selections);
  Matrix head_out;
  if (cfg.task == Task::classification) {
    head_out = add_row_bias(matmul(column_means(encoded), set[params.head_w].value),
                            set[params.head_b].value);
    result.output = head_out;
  } else {
    head_out = add_row_bias(matmul(encoded, set[params.head_w].value), set[params.head_b].value);
    result.output = destationarize(head_out, stats);
  }
  if (cache) {
    cache->x_stationary = std::move(xs);
    cache->stats = std::move(stats);
    cache->destat = std::move(destat);
    cache->xi_hidden_pre = std::move(xi_out.hidden_pre);
    cache->delta_hidden_pre = std::move(delta_out.hidden_pre);
    cache->xi_pre = cfg.kind == ModelKind::nonstationary ? xi_out.out[0] : 0.0;
    cache->head_out = std::move(head_out);
  }
  return result;
}

void model_backward(ModelParams& params, const ModelCache& cache, const Matrix& doutput) {
  const ModelConfig& cfg = params.config;
  ParamSet& set = params.set;
  const std::size_t t_len = cache.encoded.rows();

  Matrix de;
  if (cfg.task == Task::classification) {
    const Matrix pooled = column_means(cache.encoded);
    set[params.head_w].grad += matmul_tn(pooled, doutput);
    set[params.head_b].grad += doutput;
    const Matrix dpooled = matmul_nt(doutput, set[params.head_w].value);
    de = Matrix(t_len, cfg.d_model);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t c = 0; c < cfg.d_model; ++c) de(t, c) = dpooled[c] / static_cast<double>(t_len);
  } else {
    Matrix dhead = doutput;
    for (std::size_t t = 0; t < dhead.rows(); ++t)
      for (std::size_t j = 0; j < dhead.cols(); ++j) dhead(t, j) *= cache.stats.sigma[j];
    set[params.head_w].grad += matmul_tn(cache.encoded, dhead);
    set[params.head_b].grad += column_sums(dhead);
    de = matmul_nt(dhead, set[params.head_w].value);
  }

  const MixtureConfig mix = cfg.mixture();
  const DestatFactors* destat = cache.destat ? &*cache.destat : nullptr;
  double dxi = 0.0;
  Matrix ddelta = destat ? Matrix(1, destat->delta.cols()) : Matrix();

  for (std::size_t b = cfg.blocks; b-- > 0;) {
    const BlockSlots& bs = params.blocks[b];
    const BlockCache& bc = cache.blocks[b];
    const LayerNormAdjoint n2 = layer_norm_backward(bc.norm2, set[bs.norm2_gain].value, de);
    set[bs.norm2_gain].grad += n2.dgain;
    set[bs.norm2_bias].grad += n2.dbias;
    // r2 = e1 + ff
    set[bs.ff_w2].grad += matmul_tn(bc.ff_act, n2.dx);
    set[bs.ff_b2].grad += column_sums(n2.dx);
    const Matrix dpre = gelu_backward(bc.ff_pre, matmul_nt(n2.dx, set[bs.ff_w2].value));
    Matrix de1 = n2.dx;
    set[bs.ff_w1].grad += matmul_tn(bc.norm1_out, dpre);
    set[bs.ff_b1].grad += column_sums(dpre);
    de1 += matmul_nt(dpre, set[bs.ff_w1].value);

    const LayerNormAdjoint n1 = layer_norm_backward(bc.norm1, set[bs.norm1_gain].value, de1);
    set[bs.norm1_gain].grad += n1.dgain;
    set[bs.norm1_bias].grad += n1.dbias;
    // r1 = input + attention(input)
    const std::vector<HeadParams> heads = block_heads(params, b);
    const MixtureGrads mg =
        mixture_of_head_backward(bc.mixture, mix, heads, set[bs.w_o].value, destat, n1.dx);
    set[bs.w_o].grad += mg.dw_o;
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      const HeadSlots& hs = bs.heads[i];
      const HeadGrads& hg = mg.heads[i];
      set[hs.w_q].grad += hg.dw_q;
      set[hs.w_k].grad += hg.dw_k;
      set[hs.w_v].grad += hg.dw_v;
      if (hs.lambda_raw) set[*hs.lambda_raw].grad[0] += hg.dlambda_raw;
      if (hs.beta_raw) set[*hs.beta_raw].grad[0] += hg.dbeta_raw;
      if (hs.tau_raw) set[*hs.tau_raw].grad[0] += hg.dtau_raw;
    }
    if (destat) {
      dxi += mg.dxi;
      ddelta += mg.ddelta;
    }
    de = n1.dx + mg.dx;
  }

  set[params.embed].grad += matmul_tn(cache.x_stationary, de);

  if (cfg.kind == ModelKind::nonstationary) {
    const Matrix dxi_pre(1, 1, dxi * sigmoid(cache.xi_pre));
    projector_backward(set, *params.xi_proj, stats_row(cache.stats.sigma), cache.xi_hidden_pre, dxi_pre);
    projector_backward(set, *params.delta_proj, stats_row(cache.stats.mu), cache.delta_hidden_pre, ddelta);
  }
}

LossValue reconstruction_loss(const Matrix& output, const Matrix& target, const Matrix* hidden_mask) {
  require_same_shape(output, target, "reconstruction_loss");
  if (hidden_mask) require_same_shape(output, *hidden_mask, "reconstruction_loss");
  LossValue lv{0.0, Matrix(output.rows(), output.cols())};
  std::size_t n = 0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    if (hidden_mask && (*hidden_mask)[i] != 0.0) continue;
    const double diff = output[i] - target[i];
    lv.loss += diff * diff;
    lv.grad[i] = diff;
    ++n;
  }
  if (n == 0) throw DegenerateError("reconstruction_loss: the mask hides no entries");
  const double inv = 1.0 / static_cast<double>(n);
  lv.loss *= inv;
  lv.grad *= 2.0 * inv;
  return lv;
}

LossValue cross_entropy_loss(const Matrix& logits, int label) {
  if (logits.rows() != 1) throw ShapeError("cross_entropy_loss: logits must be a single row");
  if (label < 0 || static_cast<std::size_t>(label) >= logits.cols())
    throw ParameterError("cross_entropy_loss: label " + std::to_string(label) + " outside [0, " +
                         std::to_string(logits.cols()) + ")");
  const Matrix p = softmax_rows(logits);
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double sum = 0.0;
  for (double v : logits.values()) sum += std::exp(v - mx);
  LossValue lv{mx + std::log(sum) - logits[static_cast<std::size_t>(label)], p};
  lv.grad[static_cast<std::size_t>(label)] -= 1.0;
  return lv;
}

LossValue task_loss(Task task, const Matrix& output, const SeriesSample& sample) {
  switch (task) {
    case Task::imputation:
      if (!sample.mask) throw DegenerateError("imputation sample has no mask");
      return reconstruction_loss(output, sample.values, &*sample.mask);
    case Task::anomaly:
      return reconstruction_loss(output, sample.values, nullptr);
    case Task::classification:
      if (!sample.label) throw DegenerateError("classification sample has no label");
      return cross_entropy_loss(output, *sample.label);
  }
  throw ConfigError("unknown task");
}

double sample_loss(ModelParams& params, const SeriesSample& sample, bool accumulate_grads,
                   double scale, const ForwardOptions& options, SelectionTable* selections) {
  const Task task = params.config.task;
  const Matrix* mask = task == Task::imputation && sample.mask ? &*sample.mask : nullptr;
  ModelCache cache;
  ForwardResult fr = model_forward(params, sample.values, mask, options,
                                   accumulate_grads ? &cache : nullptr);
  LossValue lv = task_loss(task, fr.output, sample);
  if (selections) *selections = std::move(fr.selections);
  if (accumulate_grads && std::isfinite(lv.loss)) {
    lv.grad *= scale;
    model_backward(params, cache, lv.grad);
  }
  return lv.loss;
}

}  // namespace cab
