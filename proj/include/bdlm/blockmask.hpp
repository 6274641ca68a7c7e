// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bdlm/mask_spec.hpp"
#include "bdlm/trajectory.hpp"

namespace bdlm {

/// Block grid of one sequence: prompt_blocks aligned prompt blocks followed
/// by output_blocks generated blocks, each block_size tokens.
struct BlockLayout {
  int64_t block_size = 1;
  int64_t prompt_blocks = 0;
  int64_t output_blocks = 1;

  int64_t total_blocks() const { return prompt_blocks + output_blocks; }
  int64_t total_len() const { return total_blocks() * block_size; }
  int64_t prompt_len() const { return prompt_blocks * block_size; }
  int64_t output_len() const { return output_blocks * block_size; }

  /// Throws LayoutError on an empty or oversize grid.
  void validate(int64_t max_seq_len) const;
};

/// Left-pads `prompt` with `pad_id` to a whole number of blocks.
std::vector<int32_t> align_prompt(std::span<const int32_t> prompt, int64_t block_size, int32_t pad_id);

enum class CopyKind : uint8_t { Clean, Noisy };

/// Identity of the block copy a token of an expanded sequence belongs to.
/// `block` counts prompt blocks first; `step` is the decoding step a noisy
/// copy replays (0 for SFT copies, -1 for clean copies).
struct CopyTag {
  CopyKind kind = CopyKind::Clean;
  int32_t block = 0;
  int32_t step = -1;

  bool operator==(const CopyTag&) const = default;
};

struct ExpandedSequence {
  std::vector<int32_t> tokens;
  std::vector<int32_t> positions;  // original sequence positions
  std::vector<CopyTag> tags;
  std::vector<uint8_t> loss_mask;
  std::vector<int32_t> targets;      // clean token at loss positions, -1 elsewhere
  std::vector<int32_t> step_record;  // trace replay: index into Trajectory::steps, -1 elsewhere
  std::vector<int32_t> step_slot;    // trace replay: index inside that StepRecord
  MaskSpec mask;

  int64_t size() const { return static_cast<int64_t>(tokens.size()); }
  std::vector<int64_t> loss_rows() const;
};

/// Block-causal mask over blocks 0..active_block (inclusive): every token sees
/// all earlier blocks and its whole own block.
MaskSpec inference_mask(const BlockLayout& layout, int64_t active_block);

enum class RepeatMode {
  Blockwise,   // prompt and output repeated block by block (clean k, noisy k, ...)
  OutputOnly,  // prompt once, then clean output, then noisy output
};

/// Single-pass SFT sequence. Clean copy k sees clean copies <= k; noisy copy k
/// sees clean copies < k and itself. Loss sits on noisy output positions
/// holding `mask_token_id`.
ExpandedSequence sft_repeat_expansion(const BlockLayout& layout, std::span<const int32_t> clean_tokens,
                                      std::span<const int32_t> noisy_tokens, int32_t mask_token_id,
                                      RepeatMode mode = RepeatMode::Blockwise);

/// Layout implied by a trajectory (prompt aligned to block_size).
BlockLayout trajectory_layout(const Trajectory& trajectory, int64_t block_size);

/// Validates that each output block's step records partition its positions
/// with consecutive step indices and tokens that match the output.
void validate_trace(const Trajectory& trajectory, int64_t block_size);

/// Replays the decoding-time conditioning of `trajectory`: one clean copy per
/// block, and per decoding step one noisy copy of its block holding the state
/// before that step. Loss positions are the tokens decoded at that step.
ExpandedSequence trace_replay_expansion(const BlockLayout& layout, const Trajectory& trajectory, int32_t mask_token_id,
                                        int32_t pad_token_id);

enum class MaskKind { Inference, SftBlockwise, SftOutputOnly, TraceReplay };

/// Pointwise reference of the visibility rules, computed from index
/// arithmetic alone. `active_block` applies to Inference; `trajectory` to
/// TraceReplay.
VisibilityFn visibility_oracle(MaskKind kind, const BlockLayout& layout, int64_t active_block = 0,
                               const Trajectory* trajectory = nullptr);

}  // namespace bdlm
