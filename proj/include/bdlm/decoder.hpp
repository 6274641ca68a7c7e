// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "bdlm/blockmask.hpp"
#include "bdlm/model.hpp"
#include "bdlm/trajectory.hpp"
#include "json.hpp"

namespace bdlm {

enum class DecodeMode { Static, Dynamic };

struct DecodePolicy {
  DecodeMode mode = DecodeMode::Static;
  float threshold = 0.9f;    // dynamic only
  float temperature = 0.0f;  // 0 = argmax
  int64_t max_new_tokens = 48;
  uint64_t seed = 0;

  /// Throws ConfigError on an out-of-range field.
  void validate() const;
  bool operator==(const DecodePolicy&) const = default;
};

void to_json(nlohmann::json& j, const DecodePolicy& p);
void from_json(const nlohmann::json& j, DecodePolicy& p);

/// Positions (indices into `top1`) decoded at one step. `top1` holds the
/// untempered top-1 probability of every still-masked position, in block order.
std::vector<size_t> select_positions(std::span<const float> top1, const DecodePolicy& policy);

struct DecodedBlock {
  std::vector<int32_t> tokens;
  std::vector<StepRecord> steps;
  int64_t forward_calls = 0;
};

/// Decodes one block at the end of `cache` and commits it. Step records carry
/// `block_index` and output-relative positions starting at `output_offset`.
DecodedBlock decode_block(const ModelParams& params, KvCache& cache, const DecodePolicy& policy, std::mt19937_64& rng,
                          int32_t block_index = 0, int64_t output_offset = 0);

/// Blockwise generation with a KV cache. Stops after the block holding the
/// first decoded EOS or when max_new_tokens (rounded up to whole blocks) or
/// the model's max_seq_len is reached.
Trajectory generate(const ModelParams& params, std::span<const int32_t> prompt, const DecodePolicy& policy);

/// Same decoding without a cache: every step re-runs the whole prefix under
/// the block-causal inference mask.
Trajectory generate_uncached(const ModelParams& params, std::span<const int32_t> prompt, const DecodePolicy& policy);

/// log pi(token | pre-step state) for every decoded token, shaped like
/// trajectory.steps[i].logprobs. One forward over the trace replay expansion.
std::vector<std::vector<float>> replay_logprobs(const ModelParams& params, const Trajectory& trajectory);

struct ReplayToken {
  int32_t trajectory = 0;
  int32_t step = 0;
  int32_t slot = 0;
};

/// Packs the replay expansions of `trajectories` into one forward on `params`'
/// tape. Returns a rank-1 Var of log-probs; `index` receives the origin of
/// each entry.
Var replay_logprobs_on_tape(const BoundParams& params, std::span<const Trajectory* const> trajectories,
                            std::vector<ReplayToken>& index);

}  // namespace bdlm
