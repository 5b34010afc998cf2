#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "miles/params.hpp"

namespace miles {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::initializer_list<ParamStore<T>*> stores, double max_norm) {
  double sq = 0.0;
  for (auto* s : stores) {
    for (const auto& [_, p] : *s) {
      if (!p.has_grad()) continue;
      for (T g : p.grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto* s : stores) {
      for (auto& [_, p] : *s) {
        if (!p.has_grad()) continue;
        for (T& g : p.grad.data()) g *= factor;
      }
    }
  }
  return norm;
}

/// One Adam update over every parameter of `params`, keyed by `prefix + name`
/// in the shared state. Parameters without a gradient are treated as having a
/// zero gradient, so the moment estimates still decay.
template <typename T>
void adam_update(ParamStore<T>& params, const std::string& prefix, AdamState<T>& state, double lr,
                 const AdamConfig& cfg = {}) {
  const double t = static_cast<double>(state.step);
  if (state.step <= 0) throw ContractError("adam_update: call adam_begin_step first");
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  for (auto& [name, p] : params) {
    const std::string key = prefix + name;
    auto& m = state.m[key];
    auto& v = state.v[key];
    if (m.empty()) m = Tensor<T>(p.value.shape(), T{0});
    if (v.empty()) v = Tensor<T>(p.value.shape(), T{0});
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) {
      throw DimensionError("adam_update: state shape mismatch for '" + key + "'");
    }
    if (p.has_grad() && p.grad.shape() != p.value.shape()) {
      throw DimensionError("adam_update: gradient shape mismatch for '" + key + "'");
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.has_grad() ? p.grad[i] : T{0};
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      p.value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <typename T>
void adam_begin_step(AdamState<T>& state) {
  ++state.step;
}

}  // namespace miles
