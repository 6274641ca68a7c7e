// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "bdlm/blockmask.hpp"
#include "bdlm/model.hpp"
#include "bdlm/optim.hpp"

namespace bdlm {

/// Linear keep-probability alpha(t) = 1 - t with ELBO weight w(t) = 1/t,
/// where w is held at w(min_t) below min_t.
struct DiffusionSchedule {
  float min_t = 0.02f;

  float alpha(float t) const { return 1.0f - t; }
  float weight(float t) const { return 1.0f / std::max(t, min_t); }
};

struct NoisedBlock {
  std::vector<int32_t> tokens;
  std::vector<uint8_t> masked;
};

/// Masks each token independently with probability 1 - alpha(t). For t > 0 at
/// least one position ends up masked.
NoisedBlock noise_block(std::span<const int32_t> block, float t, int32_t mask_token_id, const DiffusionSchedule& schedule,
                        std::mt19937_64& rng);

/// One training sequence: aligned prompt followed by EOS-padded response
/// blocks, with a noise level per output block.
struct NoisySequence {
  BlockLayout layout;
  std::vector<int32_t> clean;
  std::vector<int32_t> noisy;
  std::vector<uint8_t> masked;
  std::vector<float> block_t;  // per output block
};

struct NoisyBatch {
  std::vector<NoisySequence> items;

  int64_t masked_count() const;
  int64_t output_tokens() const;
};

/// Aligns the prompt, pads the response with EOS to whole blocks, draws
/// t ~ Uniform(0, 1] per output block and noises each block.
NoisySequence make_noisy_sequence(const ModelConfig& cfg, std::span<const int32_t> prompt, std::span<const int32_t> response,
                                  const DiffusionSchedule& schedule, std::mt19937_64& rng);

/// Builds a sequence with fixed per-block noise levels and explicit masks
/// (masked[i] != 0 replaces position i of the output region).
NoisySequence make_noisy_sequence(const ModelConfig& cfg, std::span<const int32_t> prompt, std::span<const int32_t> response,
                                  std::span<const float> block_t, std::span<const uint8_t> output_masked);

struct LossResult {
  double loss = 0.0;
  GradMap grads;  // empty unless requested
  int64_t loss_tokens = 0;
  int64_t forward_calls = 0;
};

/// Blockwise NELBO: w(t)-weighted cross-entropy over masked output tokens,
/// divided by the sum of those weights. Every sequence of the batch is
/// expanded and all of them go through one packed forward.
LossResult sft_loss(const ModelParams& params, const NoisyBatch& batch, const DiffusionSchedule& schedule, bool with_grad,
                    RepeatMode mode = RepeatMode::Blockwise);

/// Same objective computed block by block: one forward per output block over
/// the clean prefix plus that block's noisy state. No gradients.
LossResult sft_loss_sequential(const ModelParams& params, const NoisyBatch& batch, const DiffusionSchedule& schedule);

/// Logits at the loss positions of the single expanded forward, in expansion order.
Tensor expanded_loss_logits(const ModelParams& params, const NoisySequence& seq, RepeatMode mode = RepeatMode::Blockwise);
/// Logits at the same positions from one forward per output block.
Tensor sequential_loss_logits(const ModelParams& params, const NoisySequence& seq);

struct SftConfig {
  int64_t steps = 1500;
  int64_t batch_size = 32;
  float lr = 1e-3f;
  int64_t warmup = 50;
  float weight_decay = 0.0f;
  float beta1 = 0.9f;
  float beta2 = 0.99f;
  float grad_clip = 1.0f;
  uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const SftConfig& c);
void from_json(const nlohmann::json& j, SftConfig& c);

struct SftExample {
  std::vector<int32_t> prompt;
  std::vector<int32_t> response;
};

struct SftStepMetrics {
  int64_t step = 0;
  double loss = 0.0;
  float lr = 0.0f;
  double masked_frac = 0.0;
  double wall_ms = 0.0;
};

using SftCallback = std::function<void(const SftStepMetrics&, const ModelParams&)>;

/// Runs sample-t -> noise -> loss -> AdamW under a cosine schedule. Throws
/// NumericError on a non-finite loss.
std::vector<SftStepMetrics> sft_train(ModelParams& params, const SftConfig& config, const std::vector<SftExample>& dataset,
                                      const DiffusionSchedule& schedule = {}, const SftCallback& on_step = {});

}  // namespace bdlm
