#pragma once

// Adam with decoupled weight decay, two parameter groups.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmad/score_model.hpp"

namespace dmad {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_attention_projection = 1e-4;
  double lr_mlp = 2e-4;
  double wd_attention_projection = 0.0;
  double wd_mlp = 1e-5;
};

template <typename T>
struct OptimizerState {
  OptimizerConfig config;
  ModelParams<T> first_moment;
  ModelParams<T> second_moment;
  std::uint64_t step = 0;
};

template <typename T>
OptimizerState<T> make_optimizer(const ModelParams<T>& params, const OptimizerConfig& config) {
  return {config, zeros_like(params), zeros_like(params), 0};
}

// p <- p - lr*wd*p, then the bias-corrected moment update. Non-trainable
// tensors (BN running statistics) are left untouched.
template <typename T>
void optimizer_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& state) {
  std::vector<std::span<const T>> g;
  for_each_tensor(grads, [&](const TensorInfo&, std::span<const T> v) { g.push_back(v); });
  std::vector<std::span<T>> m;
  std::vector<std::span<T>> s;
  for_each_tensor(state.first_moment, [&](const TensorInfo&, std::span<T> v) { m.push_back(v); });
  for_each_tensor(state.second_moment, [&](const TensorInfo&, std::span<T> v) { s.push_back(v); });

  std::size_t k = 0;
  bool shapes_ok = g.size() == m.size() && g.size() == s.size();
  for_each_tensor(params, [&](const TensorInfo&, std::span<T> v) {
    if (k >= g.size() || g[k].size() != v.size() || m[k].size() != v.size() || s[k].size() != v.size()) {
      shapes_ok = false;
    }
    ++k;
  });
  if (!shapes_ok || k != g.size()) throw ValidationError("optimizer_step: gradient/state shape mismatch");

  const auto& cfg = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  k = 0;
  for_each_tensor(params, [&](const TensorInfo& info, std::span<T> v) {
    const std::size_t idx = k++;
    if (!info.trainable) return;
    const bool mlp = info.group == ParamGroup::mlp;
    const double lr = mlp ? cfg.lr_mlp : cfg.lr_attention_projection;
    const double wd = mlp ? cfg.wd_mlp : cfg.wd_attention_projection;
    for (std::size_t i = 0; i < v.size(); ++i) {
      double p = v[i];
      p -= lr * wd * p;
      const double gi = g[idx][i];
      const double mi = cfg.beta1 * m[idx][i] + (1.0 - cfg.beta1) * gi;
      const double si = cfg.beta2 * s[idx][i] + (1.0 - cfg.beta2) * gi * gi;
      m[idx][i] = static_cast<T>(mi);
      s[idx][i] = static_cast<T>(si);
      p -= lr * (mi / bc1) / (std::sqrt(si / bc2) + cfg.eps);
      v[i] = static_cast<T>(p);
    }
  });
}

}  // namespace dmad
