#include "cab/params.hpp"

#include <algorithm>
#include <cmath>

#include "cab/errors.hpp"

namespace cab {

ParamSet::Handle ParamSet::add(std::string name, Matrix value, bool trainable) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  const Handle h = params_.size();
  Matrix grad(value.rows(), value.cols());
  index_.emplace(name, h);
  params_.push_back(Param{std::move(name), std::move(value), std::move(grad), trainable});
  return h;
}

Param& ParamSet::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

const Param& ParamSet::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

bool ParamSet::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParamSet::entry_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamSet::accumulate_grads(const ParamSet& other) {
  if (other.size() != size()) throw ConfigError("accumulate_grads: registry layouts differ");
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].grad += other.params_[i].grad;
}

const ParamGradCheck* GradCheckReport::find(std::string_view name) const {
  auto it = std::find_if(params.begin(), params.end(),
                         [&](const ParamGradCheck& p) { return p.name == name; });
  return it == params.end() ? nullptr : &*it;
}

GradCheckReport check_gradient(ParamSet& params, const std::function<double()>& loss,
                               const std::function<void()>& analytic,
                               const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ParameterError("gradient check step must be positive");
  analytic();
  // snapshot, since loss() may be implemented on top of the same registry
  std::vector<Matrix> analytic_grads;
  analytic_grads.reserve(params.size());
  for (const auto& p : params) analytic_grads.push_back(p.grad);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = params[pi];
    if (!p.trainable) continue;
    ParamGradCheck check;
    check.name = p.name;
    check.entries = p.value.size();
    for (std::size_t e = 0; e < p.value.size(); ++e) {
      const double saved = p.value[e];
      p.value[e] = saved + options.step;
      const double up = loss();
      p.value[e] = saved - options.step;
      const double down = loss();
      p.value[e] = saved;
      const double a = analytic_grads[pi][e];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(a)) {
        check.non_finite = true;
        check.passed = false;
        continue;
      }
      const double numeric = (up - down) / (2.0 * options.step);
      const double abs_err = std::abs(a - numeric);
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = abs_err / denom;
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_entry = e;
      }
    }
    if (check.max_rel_error > options.tolerance) check.passed = false;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.non_finite = report.non_finite || check.non_finite;
    report.passed = report.passed && check.passed;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace cab
