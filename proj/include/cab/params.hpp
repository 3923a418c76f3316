#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cab/matrix.hpp"

namespace cab {

// A learnable tensor with its accumulated adjoint. Scalars are stored as 1x1.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  // Frozen parameters keep a grad slot but are skipped by optimizers and
  // gradient checks.
  bool trainable = true;

  double scalar() const { return value[0]; }
};

// Flat registry of named parameters. Handles are indices, so copying the set
// yields an independent registry whose handles are still valid.
class ParamSet {
 public:
  using Handle = std::size_t;

  Handle add(std::string name, Matrix value, bool trainable = true);

  Param& operator[](Handle h) { return params_[h]; }
  const Param& operator[](Handle h) const { return params_[h]; }
  Param& at(std::string_view name);
  const Param& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  // Total number of scalar entries across all parameters.
  std::size_t entry_count() const;
  // Adds every grad of `other` into this set; registries must share layout.
  void accumulate_grads(const ParamSet& other);

 private:
  std::deque<Param> params_;
  std::unordered_map<std::string, Handle> index_;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-4;
};

struct ParamGradCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_entry = 0;
  bool non_finite = false;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  bool non_finite = false;
  bool passed = true;

  const ParamGradCheck* find(std::string_view name) const;
};

/// Compares analytic gradients with central finite differences for every
/// trainable entry of `params`.
///
/// `loss` evaluates the objective at the current parameter values.
/// `analytic` must leave d(loss)/d(param) in each grad slot for the current
/// values (it is responsible for zeroing first). Non-finite perturbed losses
/// fail the affected parameter and are reported, never skipped.
GradCheckReport check_gradient(ParamSet& params, const std::function<double()>& loss,
                               const std::function<void()>& analytic,
                               const GradCheckOptions& options = {});

}  // namespace cab
