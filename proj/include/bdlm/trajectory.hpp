// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace bdlm {

/// One parallel denoising step inside an output block. Positions are offsets
/// into the trajectory's output (0 = first generated token).
struct StepRecord {
  int32_t block = 0;
  int32_t step = 0;
  std::vector<int32_t> positions;
  std::vector<int32_t> tokens;
  std::vector<float> logprobs;  // behavior log-prob of each token at its step

  bool operator==(const StepRecord&) const = default;
};

enum class FinishReason { Eos, Length };

struct TrajectoryStats {
  int64_t total_steps = 0;
  double tokens_per_step = 0.0;

  bool operator==(const TrajectoryStats&) const = default;
};

struct Trajectory {
  std::vector<int32_t> prompt;  // as supplied, before block alignment
  std::vector<int32_t> output;  // whole decoded blocks, including tokens after EOS
  std::vector<StepRecord> steps;
  FinishReason finish = FinishReason::Length;
  TrajectoryStats stats;
  uint64_t version = 0;  // weight version that produced it (0 = untagged)
  float temperature = 0.0f;  // sampling temperature; 0 = argmax, recorded untempered

  /// Offset of the first EOS in `output`, or output.size() if none.
  int64_t first_eos(int32_t eos_token_id) const;
  /// Output prefix up to and including the first EOS.
  std::vector<int32_t> scored_output(int32_t eos_token_id) const;

  bool operator==(const Trajectory&) const = default;
};

void to_json(nlohmann::json& j, const StepRecord& s);
void from_json(const nlohmann::json& j, StepRecord& s);
void to_json(nlohmann::json& j, const Trajectory& t);
void from_json(const nlohmann::json& j, Trajectory& t);

}  // namespace bdlm
