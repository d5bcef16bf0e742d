// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cmr/config.hpp"
#include "cmr/errors.hpp"
#include "cmr/params.hpp"

namespace cmr {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
  bool decoupled = true;       // false: decay enters the gradient as L2
  bool decay_norm_params = false;

  static AdamOptions from(const RunConfig& c) {
    return {c.learning_rate, c.beta1,  c.beta2, c.epsilon, c.weight_decay, c.max_grad_norm,
            c.decoupled_weight_decay, c.decay_norm_params};
  }
};

template <typename T>
struct AdamMoments {
  std::vector<T> m, v;
};

/// One bias-corrected Adam update of a flat parameter array at step t (>= 1).
/// grad is used as given (clipping happens before this call).
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments<T>& state,
                 const AdamOptions& opt, long step, bool decay) {
  if (param.size() != grad.size()) {
    throw DimensionError("adam_update: " + std::to_string(param.size()) + " parameters vs " +
                         std::to_string(grad.size()) + " gradient entries");
  }
  if (step < 1) throw ContractError("adam_update: step counter starts at 1");
  if (state.m.empty()) {
    state.m.assign(param.size(), T{0});
    state.v.assign(param.size(), T{0});
  }
  if (state.m.size() != param.size()) {
    throw DimensionError("adam_update: moment size " + std::to_string(state.m.size()) +
                         " vs " + std::to_string(param.size()) + " parameters");
  }
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const double lr = opt.learning_rate;
  const double wd = decay ? opt.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = static_cast<double>(grad[i]);
    double p = static_cast<double>(param[i]);
    if (!opt.decoupled) g += wd * p;
    const double m = opt.beta1 * state.m[i] + (1 - opt.beta1) * g;
    const double v = opt.beta2 * state.v[i] + (1 - opt.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    if (opt.decoupled) p -= lr * wd * p;
    p -= lr * (m / c1) / (std::sqrt(v / c2) + opt.epsilon);
    param[i] = static_cast<T>(p);
  }
}

/// Adam over a parameter store: global gradient-norm clipping, then one
/// update per trainable parameter. Frozen parameters never get state.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const noexcept { return options_; }
  long steps() const noexcept { return step_; }
  const std::map<std::string, AdamMoments<T>>& state() const noexcept { return state_; }
  /// Global gradient norm seen by the last step, before clipping.
  double last_grad_norm() const noexcept { return last_norm_; }

  static double global_grad_norm(const ParameterStore<T>& store) {
    double total = 0;
    for (const auto& [name, e] : store.entries()) {
      if (e.kind == ParamKind::frozen || !e.tensor.has_grad()) continue;
      for (T g : e.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(total);
  }

  /// Scales every gradient so the global norm is at most max_norm.
  static double clip_grad_norm(const ParameterStore<T>& store, double max_norm) {
    const double norm = global_grad_norm(store);
    if (max_norm > 0 && norm > max_norm) {
      const double factor = max_norm / norm;
      for (const auto& [name, e] : store.entries()) {
        if (e.kind == ParamKind::frozen || !e.tensor.has_grad()) continue;
        for (auto& g : e.tensor.grad_buffer()) g = static_cast<T>(g * factor);
      }
    }
    return norm;
  }

  void step(const ParameterStore<T>& store) {
    last_norm_ = clip_grad_norm(store, options_.max_grad_norm);
    ++step_;
    for (const auto& [name, e] : store.entries()) {
      if (e.kind == ParamKind::frozen) continue;
      const bool decay = e.kind != ParamKind::norm || options_.decay_norm_params;
      auto values = e.tensor.mutable_values();
      if (e.tensor.has_grad()) {
        adam_update<T>(values, e.tensor.grad(), state_[name], options_, step_, decay);
      } else {
        const std::vector<T> zeros(values.size(), T{0});
        adam_update<T>(values, zeros, state_[name], options_, step_, decay);
      }
    }
  }

 private:
  AdamOptions options_;
  long step_ = 0;
  double last_norm_ = 0;
  std::map<std::string, AdamMoments<T>> state_;
};

}  // namespace cmr
