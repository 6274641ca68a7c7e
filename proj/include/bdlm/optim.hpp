// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bdlm/tensor.hpp"

namespace bdlm {

using TensorMap = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, std::vector<float>>;

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

struct OptimState {
  AdamWConfig hp;
  int64_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

/// Adds `src` into `dst`, allocating missing entries.
void accumulate_grads(GradMap& dst, const GradMap& src, float scale = 1.0f);
double grad_norm(const GradMap& grads);
/// Rescales so the global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(GradMap& grads, double max_norm);

/// One AdamW update with bias correction and decoupled weight decay, using
/// `lr` for this step. Parameters absent from `grads` see a zero gradient.
/// Throws NumericError (and leaves params and state untouched) if any
/// gradient is non-finite.
void optimizer_step(TensorMap& params, const GradMap& grads, OptimState& state, float lr);
inline void optimizer_step(TensorMap& params, const GradMap& grads, OptimState& state) {
  optimizer_step(params, grads, state, state.hp.lr);
}

/// Cosine annealing from lr_max to 0 over `total` steps after a linear warmup.
/// The final step (step == total - 1) gets exactly 0.
float cosine_lr(float lr_max, int64_t step, int64_t total, int64_t warmup = 0);

}  // namespace bdlm
