#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cab/attention.hpp"
#include "cab/matrix.hpp"
#include "cab/params.hpp"
#include "cab/synthdata.hpp"

namespace cab {

// ---------------------------------------------------------------------------
// Stationarization
// ---------------------------------------------------------------------------

constexpr double kSigmaFloor = 1e-5;

struct StationaryStats {
  std::vector<double> mu;
  std::vector<double> sigma;  // population standard deviation, floored at kSigmaFloor
};

// X′ = (X − 1μᵀ)/σ per feature. With a mask (1 = observed) the statistics use
// observed entries only and hidden entries are set to 0 in the output.
std::pair<Matrix, StationaryStats> stationarize(const Matrix& x, const Matrix* mask = nullptr);
Matrix destationarize(const Matrix& x, const StationaryStats& stats);

// ---------------------------------------------------------------------------
// Configuration and parameters
// ---------------------------------------------------------------------------

enum class ModelKind { transformer, nonstationary };

std::string_view model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct ModelConfig {
  Task task = Task::imputation;
  ModelKind kind = ModelKind::transformer;
  std::size_t seq_len = 96;
  std::size_t d_in = 8;
  std::size_t d_model = 64;
  std::size_t heads = 16;
  std::size_t temporal_heads = 8;
  std::size_t d_k = 0;   // 0 means d_model / heads
  std::size_t blocks = 2;
  std::size_t d_ff = 0;  // 0 means 4·d_model
  std::size_t num_classes = 0;
  bool positional_encoding = false;
  // Initial values and modes shared by every correlated head.
  CabParams cab;
  bool learn_beta = true;
  bool learn_tau = true;
  LagPath lag_path = LagPath::fft;
  int threads = 1;

  std::size_t head_dim() const { return d_k ? d_k : d_model / heads; }
  std::size_t ff_dim() const { return d_ff ? d_ff : 4 * d_model; }
  std::size_t output_dim() const { return task == Task::classification ? num_classes : d_in; }
  MixtureConfig mixture() const;
  bool operator==(const ModelConfig&) const = default;
};

// λ stays fixed at 1/2 for small heads and is learnable from d_k = 100 up.
LambdaMode default_lambda_mode(std::size_t d_k);

// Throws ConfigError on inconsistent settings.
void validate_config(const ModelConfig& cfg);

struct HeadSlots {
  ParamSet::Handle w_q = 0, w_k = 0, w_v = 0;
  // Registered for correlated heads only.
  std::optional<ParamSet::Handle> lambda_raw, beta_raw, tau_raw;
};

struct BlockSlots {
  std::vector<HeadSlots> heads;
  ParamSet::Handle w_o = 0;
  ParamSet::Handle norm1_gain = 0, norm1_bias = 0;
  ParamSet::Handle ff_w1 = 0, ff_b1 = 0, ff_w2 = 0, ff_b2 = 0;
  ParamSet::Handle norm2_gain = 0, norm2_bias = 0;
};

// Two-layer map: gelu(s·W1 + b1)·W2 + b2 on a 1×d_in statistics row.
struct ProjectorSlots {
  ParamSet::Handle w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

struct ModelParams {
  ModelConfig config;
  ParamSet set;
  ParamSet::Handle embed = 0;
  std::vector<BlockSlots> blocks;
  ParamSet::Handle head_w = 0, head_b = 0;
  // Non-stationary model only: ξ = softplus(proj(σ)), Δ = proj(μ).
  std::optional<ProjectorSlots> xi_proj, delta_proj;
};

// Weights are drawn from N(0, 1/fan_in); norm gains start at 1 and biases at 0.
ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

// Closed-form count of every registered scalar (trainable or not).
std::size_t parameter_count(const ModelConfig& cfg);

// Per block and head; entries of temporal heads are unused.
using SelectionTable = std::vector<std::vector<LagSelection>>;

// ---------------------------------------------------------------------------
// Forward and backward
// ---------------------------------------------------------------------------

struct BlockCache {
  Matrix input;
  MixtureCache mixture;
  LayerNormCache norm1;
  Matrix norm1_out;
  Matrix ff_pre;  // e1·W1 + b1
  Matrix ff_act;  // gelu(ff_pre)
  LayerNormCache norm2;
};

struct ModelCache {
  Matrix x_stationary;
  StationaryStats stats;
  std::optional<DestatFactors> destat;
  Matrix xi_hidden_pre, delta_hidden_pre;  // projector pre-activations
  double xi_pre = 0.0;
  std::vector<BlockCache> blocks;
  Matrix encoded;  // T×d_model
  Matrix head_out;  // stationary reconstruction or logits
};

struct ForwardOptions {
  const SelectionTable* frozen = nullptr;
};

struct ForwardResult {
  // T×d_in reconstruction in the original scale, or 1×C logits.
  Matrix output;
  SelectionTable selections;
};

// Embedding followed by the encoder blocks, on an already stationarized input.
Matrix encoder_forward(const ModelParams& params, const Matrix& x_stationary,
                       const DestatFactors* destat = nullptr, const ForwardOptions& options = {},
                       ModelCache* cache = nullptr, SelectionTable* selections = nullptr);

// `mask` (1 = observed) hides entries from the model for imputation.
ForwardResult model_forward(const ModelParams& params, const Matrix& x, const Matrix* mask = nullptr,
                            const ForwardOptions& options = {}, ModelCache* cache = nullptr);

// Adds d(loss)/d(param) into params.set given d(loss)/d(output).
void model_backward(ModelParams& params, const ModelCache& cache, const Matrix& doutput);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossValue {
  double loss = 0.0;
  Matrix grad;  // d(loss)/d(output)
};

// MSE over entries where mask == 0; all entries without a mask. Throws
// DegenerateError when the mask hides nothing.
LossValue reconstruction_loss(const Matrix& output, const Matrix& target, const Matrix* hidden_mask);
// Cross-entropy of 1×C logits against a class index.
LossValue cross_entropy_loss(const Matrix& logits, int label);

// Task-specific loss of one sample's model output.
LossValue task_loss(Task task, const Matrix& output, const SeriesSample& sample);

// Forward, loss, and (when accumulate_grads) backward scaled by `scale` into
// params.set. Returns the unscaled loss.
double sample_loss(ModelParams& params, const SeriesSample& sample, bool accumulate_grads,
                   double scale = 1.0, const ForwardOptions& options = {},
                   SelectionTable* selections = nullptr);

}  // namespace cab
