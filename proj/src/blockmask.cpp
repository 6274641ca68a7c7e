// SPDX-License-Identifier: Apache-2.0

#include "bdlm/blockmask.hpp"

#include <algorithm>

#include "bdlm/error.hpp"

namespace bdlm {

void BlockLayout::validate(int64_t max_seq_len) const {
  if (block_size < 1) throw LayoutError("block_size must be >= 1");
  if (prompt_blocks < 0) throw LayoutError("prompt_blocks must be >= 0");
  if (output_blocks < 1) throw LayoutError("output_blocks must be >= 1");
  if (total_len() > max_seq_len) {
    throw LayoutError("layout needs " + std::to_string(total_len()) + " positions, max_seq_len is " +
                      std::to_string(max_seq_len));
  }
}

std::vector<int32_t> align_prompt(std::span<const int32_t> prompt, int64_t block_size, int32_t pad_id) {
  const auto n = static_cast<int64_t>(prompt.size());
  const int64_t padded = (n + block_size - 1) / block_size * block_size;
  std::vector<int32_t> out(static_cast<size_t>(padded - n), pad_id);
  out.insert(out.end(), prompt.begin(), prompt.end());
  return out;
}

std::vector<int64_t> ExpandedSequence::loss_rows() const {
  std::vector<int64_t> rows;
  for (size_t i = 0; i < loss_mask.size(); ++i) {
    if (loss_mask[i]) rows.push_back(static_cast<int64_t>(i));
  }
  return rows;
}

namespace {

struct Copy {
  CopyTag tag;
  int64_t offset = 0;
};

bool copy_sees(const CopyTag& query, const CopyTag& key, bool same_copy) {
  if (query.kind == CopyKind::Clean) return key.kind == CopyKind::Clean && key.block <= query.block;
  return (key.kind == CopyKind::Clean && key.block < query.block) || same_copy;
}

// Fills the mask copy-by-copy as whole B x B tiles.
MaskSpec tile_mask(const std::vector<Copy>& copies, int64_t block_size) {
  const auto len = static_cast<int64_t>(copies.size()) * block_size;
  MaskSpec mask(len, len);
  for (size_t a = 0; a < copies.size(); ++a) {
    for (size_t b = 0; b < copies.size(); ++b) {
      if (!copy_sees(copies[a].tag, copies[b].tag, a == b)) continue;
      for (int64_t i = 0; i < block_size; ++i) {
        for (int64_t j = 0; j < block_size; ++j) mask.set(copies[a].offset + i, copies[b].offset + j);
      }
    }
  }
  return mask;
}

void append_copy(ExpandedSequence& seq, std::vector<Copy>& copies, CopyTag tag, std::span<const int32_t> tokens,
                 int64_t first_position) {
  copies.push_back({tag, seq.size()});
  for (size_t i = 0; i < tokens.size(); ++i) {
    seq.tokens.push_back(tokens[i]);
    seq.positions.push_back(static_cast<int32_t>(first_position + static_cast<int64_t>(i)));
    seq.tags.push_back(tag);
    seq.loss_mask.push_back(0);
    seq.targets.push_back(-1);
    seq.step_record.push_back(-1);
    seq.step_slot.push_back(-1);
  }
}

}  // namespace

MaskSpec inference_mask(const BlockLayout& layout, int64_t active_block) {
  if (active_block < 0 || active_block >= layout.total_blocks()) {
    throw LayoutError("active block " + std::to_string(active_block) + " outside layout of " +
                      std::to_string(layout.total_blocks()) + " blocks");
  }
  std::vector<Copy> copies;
  for (int64_t b = 0; b <= active_block; ++b) {
    copies.push_back({CopyTag{CopyKind::Clean, static_cast<int32_t>(b), -1}, b * layout.block_size});
  }
  return tile_mask(copies, layout.block_size);
}

ExpandedSequence sft_repeat_expansion(const BlockLayout& layout, std::span<const int32_t> clean_tokens,
                                      std::span<const int32_t> noisy_tokens, int32_t mask_token_id, RepeatMode mode) {
  const int64_t B = layout.block_size;
  if (B < 1) throw LayoutError("block_size must be >= 1");
  const auto n = static_cast<int64_t>(clean_tokens.size());
  if (n % B != 0) throw LayoutError("sequence length " + std::to_string(n) + " is not a multiple of block size " + std::to_string(B));
  if (n != layout.total_len()) {
    throw LayoutError("sequence length " + std::to_string(n) + " does not match layout length " + std::to_string(layout.total_len()));
  }
  if (noisy_tokens.size() != clean_tokens.size()) throw LayoutError("clean and noisy sequences differ in length");
  for (int64_t i = 0; i < n; ++i) {
    const auto k = static_cast<size_t>(i);
    if (noisy_tokens[k] != clean_tokens[k] && noisy_tokens[k] != mask_token_id) {
      throw LayoutError("noisy token at " + std::to_string(i) + " is neither the clean token nor the mask token");
    }
  }

  ExpandedSequence seq;
  std::vector<Copy> copies;
  auto block_of = [&](std::span<const int32_t> s, int64_t b) { return s.subspan(static_cast<size_t>(b * B), static_cast<size_t>(B)); };
  auto add_noisy = [&](int64_t b) {
    const int64_t start = seq.size();
    append_copy(seq, copies, CopyTag{CopyKind::Noisy, static_cast<int32_t>(b), 0}, block_of(noisy_tokens, b), b * B);
    if (b < layout.prompt_blocks) return;
    for (int64_t j = 0; j < B; ++j) {
      const auto src = static_cast<size_t>(b * B + j);
      if (noisy_tokens[src] == mask_token_id) {
        seq.loss_mask[static_cast<size_t>(start + j)] = 1;
        seq.targets[static_cast<size_t>(start + j)] = clean_tokens[src];
      }
    }
  };

  if (mode == RepeatMode::Blockwise) {
    for (int64_t b = 0; b < layout.total_blocks(); ++b) {
      append_copy(seq, copies, CopyTag{CopyKind::Clean, static_cast<int32_t>(b), -1}, block_of(clean_tokens, b), b * B);
      add_noisy(b);
    }
  } else {
    for (int64_t b = 0; b < layout.total_blocks(); ++b) {
      append_copy(seq, copies, CopyTag{CopyKind::Clean, static_cast<int32_t>(b), -1}, block_of(clean_tokens, b), b * B);
    }
    for (int64_t b = layout.prompt_blocks; b < layout.total_blocks(); ++b) add_noisy(b);
  }
  seq.mask = tile_mask(copies, B);
  return seq;
}

BlockLayout trajectory_layout(const Trajectory& trajectory, int64_t block_size) {
  if (trajectory.output.size() % static_cast<size_t>(block_size) != 0) {
    throw TraceError("trajectory output length " + std::to_string(trajectory.output.size()) +
                     " is not a whole number of blocks");
  }
  BlockLayout layout;
  layout.block_size = block_size;
  layout.prompt_blocks = (static_cast<int64_t>(trajectory.prompt.size()) + block_size - 1) / block_size;
  layout.output_blocks = static_cast<int64_t>(trajectory.output.size()) / block_size;
  return layout;
}

void validate_trace(const Trajectory& trajectory, int64_t block_size) {
  const int64_t B = block_size;
  const auto out_len = static_cast<int64_t>(trajectory.output.size());
  if (out_len == 0 || out_len % B != 0) throw TraceError("trajectory output is not a positive whole number of blocks");
  const int64_t K = out_len / B;
  std::vector<int> decoded(static_cast<size_t>(out_len), 0);
  int32_t prev_block = -1, prev_step = -1;
  for (const StepRecord& r : trajectory.steps) {
    if (r.block < 0 || r.block >= K) throw TraceError("step record names block " + std::to_string(r.block) + " outside the output");
    if (r.positions.empty()) throw TraceError("step record decodes nothing");
    if (r.positions.size() != r.tokens.size() || r.positions.size() != r.logprobs.size()) {
      throw TraceError("step record fields have different lengths");
    }
    if (r.block == prev_block) {
      if (r.step != prev_step + 1) throw TraceError("non-consecutive step index in block " + std::to_string(r.block));
    } else {
      if (r.block < prev_block) throw TraceError("step records out of block order");
      if (r.step != 0) throw TraceError("block " + std::to_string(r.block) + " does not start at step 0");
    }
    prev_block = r.block;
    prev_step = r.step;
    for (size_t i = 0; i < r.positions.size(); ++i) {
      const int32_t p = r.positions[i];
      if (p < r.block * B || p >= (r.block + 1) * B) {
        throw TraceError("position " + std::to_string(p) + " is outside block " + std::to_string(r.block));
      }
      if (decoded[static_cast<size_t>(p)]++) throw TraceError("position " + std::to_string(p) + " decoded twice");
      if (trajectory.output[static_cast<size_t>(p)] != r.tokens[i]) {
        throw TraceError("step token at position " + std::to_string(p) + " disagrees with the output");
      }
    }
  }
  for (int64_t p = 0; p < out_len; ++p) {
    if (!decoded[static_cast<size_t>(p)]) throw TraceError("trace gap: output position " + std::to_string(p) + " never decoded");
  }
}

ExpandedSequence trace_replay_expansion(const BlockLayout& layout, const Trajectory& trajectory, int32_t mask_token_id,
                                        int32_t pad_token_id) {
  const int64_t B = layout.block_size;
  validate_trace(trajectory, B);
  const BlockLayout own = trajectory_layout(trajectory, B);
  if (own.prompt_blocks != layout.prompt_blocks || own.output_blocks != layout.output_blocks) {
    throw LayoutError("trajectory does not fit the given layout");
  }
  const std::vector<int32_t> prompt = align_prompt(trajectory.prompt, B, pad_token_id);
  const int64_t P = layout.prompt_blocks;

  ExpandedSequence seq;
  std::vector<Copy> copies;
  for (int64_t b = 0; b < P; ++b) {
    append_copy(seq, copies, CopyTag{CopyKind::Clean, static_cast<int32_t>(b), -1},
                std::span<const int32_t>(prompt).subspan(static_cast<size_t>(b * B), static_cast<size_t>(B)), b * B);
  }
  size_t r = 0;
  for (int64_t k = 0; k < layout.output_blocks; ++k) {
    const auto block = std::span<const int32_t>(trajectory.output).subspan(static_cast<size_t>(k * B), static_cast<size_t>(B));
    const auto abs_block = static_cast<int32_t>(P + k);
    append_copy(seq, copies, CopyTag{CopyKind::Clean, abs_block, -1}, block, (P + k) * B);
    std::vector<int32_t> state(static_cast<size_t>(B), mask_token_id);
    for (; r < trajectory.steps.size() && trajectory.steps[r].block == k; ++r) {
      const StepRecord& rec = trajectory.steps[r];
      const int64_t start = seq.size();
      append_copy(seq, copies, CopyTag{CopyKind::Noisy, abs_block, rec.step}, state, (P + k) * B);
      for (size_t i = 0; i < rec.positions.size(); ++i) {
        const auto local = static_cast<size_t>(rec.positions[i] - k * B);
        const auto row = static_cast<size_t>(start) + local;
        seq.loss_mask[row] = 1;
        seq.targets[row] = rec.tokens[i];
        seq.step_record[row] = static_cast<int32_t>(r);
        seq.step_slot[row] = static_cast<int32_t>(i);
      }
      for (size_t i = 0; i < rec.positions.size(); ++i) state[static_cast<size_t>(rec.positions[i] - k * B)] = rec.tokens[i];
    }
  }
  seq.mask = tile_mask(copies, B);
  return seq;
}

VisibilityFn visibility_oracle(MaskKind kind, const BlockLayout& layout, int64_t active_block, const Trajectory* trajectory) {
  const int64_t B = layout.block_size;
  const int64_t P = layout.prompt_blocks;
  const int64_t K = layout.output_blocks;
  switch (kind) {
    case MaskKind::Inference:
      return [B, active_block](int64_t i, int64_t j) {
        const int64_t limit = (active_block + 1) * B;
        return i < limit && j < limit && j / B <= i / B;
      };
    case MaskKind::SftBlockwise:
      // Copy c = i / B holds block c / 2; odd copies are noisy.
      return [B](int64_t i, int64_t j) {
        const int64_t ci = i / B, cj = j / B;
        const int64_t bi = ci / 2, bj = cj / 2;
        const bool noisy_i = ci % 2 == 1, noisy_j = cj % 2 == 1;
        if (!noisy_i) return !noisy_j && bj <= bi;
        return ci == cj || (!noisy_j && bj < bi);
      };
    case MaskKind::SftOutputOnly:
      // Copies: P prompt blocks, K clean output blocks, K noisy output blocks.
      return [B, P, K](int64_t i, int64_t j) {
        const int64_t ci = i / B, cj = j / B;
        const bool noisy_i = ci >= P + K, noisy_j = cj >= P + K;
        const int64_t bi = noisy_i ? ci - K : ci;
        const int64_t bj = noisy_j ? cj - K : cj;
        if (!noisy_i) return !noisy_j && bj <= bi;
        return ci == cj || (!noisy_j && bj < bi);
      };
    case MaskKind::TraceReplay: {
      if (!trajectory) throw ContractError("trace replay oracle needs a trajectory");
      // Per output block: one clean copy followed by one noisy copy per step.
      std::vector<int64_t> steps(static_cast<size_t>(K), 0);
      for (const StepRecord& r : trajectory->steps) ++steps[static_cast<size_t>(r.block)];
      std::vector<int64_t> block_of_copy;
      std::vector<uint8_t> noisy_copy;
      for (int64_t b = 0; b < P; ++b) {
        block_of_copy.push_back(b);
        noisy_copy.push_back(0);
      }
      for (int64_t k = 0; k < K; ++k) {
        for (int64_t s = 0; s <= steps[static_cast<size_t>(k)]; ++s) {
          block_of_copy.push_back(P + k);
          noisy_copy.push_back(s > 0 ? 1 : 0);
        }
      }
      return [B, block_of_copy, noisy_copy](int64_t i, int64_t j) {
        const auto ci = static_cast<size_t>(i / B), cj = static_cast<size_t>(j / B);
        const int64_t bi = block_of_copy[ci], bj = block_of_copy[cj];
        if (!noisy_copy[ci]) return !noisy_copy[cj] && bj <= bi;
        return ci == cj || (!noisy_copy[cj] && bj < bi);
      };
    }
  }
  throw ContractError("unknown mask kind");
}

}  // namespace bdlm
