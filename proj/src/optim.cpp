// SPDX-License-Identifier: Apache-2.0

#include "bdlm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bdlm/error.hpp"

namespace bdlm {

void accumulate_grads(GradMap& dst, const GradMap& src, float scale) {
  for (const auto& [name, g] : src) {
    auto& d = dst[name];
    if (d.empty()) d.assign(g.size(), 0.0f);
    if (d.size() != g.size()) throw DimensionError("gradient size mismatch for " + name);
    for (size_t i = 0; i < g.size(); ++i) d[i] += scale * g[i];
  }
}

double grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (float x : g) s += static_cast<double>(x) * x;
  }
  return std::sqrt(s);
}

double clip_grad_norm(GradMap& grads, double max_norm) {
  const double norm = grad_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto f = static_cast<float>(max_norm / norm);
    for (auto& [name, g] : grads) {
      for (float& x : g) x *= f;
    }
  }
  return norm;
}

void optimizer_step(TensorMap& params, const GradMap& grads, OptimState& state, float lr) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw DimensionError("gradient for unknown parameter " + name);
    if (static_cast<int64_t>(g.size()) != it->second.numel()) {
      throw DimensionError("gradient for " + name + " has " + std::to_string(g.size()) + " values, parameter has " +
                           std::to_string(it->second.numel()));
    }
    for (size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("non-finite gradient in " + name + " at index " + std::to_string(i) + "; step rejected");
      }
    }
  }

  const AdamWConfig& hp = state.hp;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(hp.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(hp.beta2), static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const auto n = static_cast<size_t>(p.numel());
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(n, 0.0f);
    if (v.empty()) v.assign(n, 0.0f);
    auto git = grads.find(name);
    const std::vector<float>* g = git == grads.end() ? nullptr : &git->second;
    std::vector<float> next(p.data().begin(), p.data().end());
    for (size_t i = 0; i < n; ++i) {
      const float gi = g ? (*g)[i] : 0.0f;
      m[i] = hp.beta1 * m[i] + (1.0f - hp.beta1) * gi;
      v[i] = hp.beta2 * v[i] + (1.0f - hp.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double update = mhat / (std::sqrt(vhat) + hp.eps) + static_cast<double>(hp.weight_decay) * next[i];
      next[i] = static_cast<float>(next[i] - lr * update);
    }
    p = Tensor(p.shape(), std::move(next));
  }
}

float cosine_lr(float lr_max, int64_t step, int64_t total, int64_t warmup) {
  if (total <= 1) return lr_max;
  if (step < warmup) return lr_max * static_cast<float>(step + 1) / static_cast<float>(warmup);
  const int64_t span = total - 1 - warmup;
  if (span <= 0) return step >= total - 1 ? 0.0f : lr_max;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return static_cast<float>(0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace bdlm
