// SPDX-License-Identifier: Apache-2.0

#include <random>

#include "bdlm/blockmask.hpp"
#include "bdlm/decoder.hpp"
#include "bdlm/error.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bdlm;

namespace {

constexpr int32_t kMask = 17;

// Visibility from copy tags alone: clean copies see clean copies of the same
// or earlier blocks; a noisy copy sees strictly earlier clean blocks and itself.
bool tag_rule(const ExpandedSequence& s, int64_t i, int64_t j, int64_t B) {
  const CopyTag& q = s.tags[static_cast<size_t>(i)];
  const CopyTag& k = s.tags[static_cast<size_t>(j)];
  if (q.kind == CopyKind::Clean) return k.kind == CopyKind::Clean && k.block <= q.block;
  if (k.kind == CopyKind::Clean) return k.block < q.block;
  return i / B == j / B;
}

struct RandomSeq {
  BlockLayout layout;
  std::vector<int32_t> clean, noisy;
};

RandomSeq random_sequence(std::mt19937_64& rng, int64_t B, int64_t P, int64_t K) {
  RandomSeq r;
  r.layout = {B, P, K};
  for (int64_t i = 0; i < r.layout.total_len(); ++i) {
    const auto tok = static_cast<int32_t>(rng() % 16);
    r.clean.push_back(tok);
    r.noisy.push_back(i >= P * B && rng() % 2 ? kMask : tok);
  }
  return r;
}

}  // namespace

TEST_CASE("MaskSpec basics") {
  const MaskSpec c = MaskSpec::causal(5);
  CHECK(c.count() == 15);
  CHECK(c.row_count(0) == 1);
  CHECK(c(4, 0));
  CHECK_FALSE(c(0, 4));
  CHECK(c.agrees_with([](int64_t i, int64_t j) { return j <= i; }));
  CHECK(MaskSpec::all_visible(3, 70).count() == 210);
  CHECK(c.to_pbm().rfind("P1\n5 5\n", 0) == 0);
  MaskSpec m(2, 3);
  m.set(0, 2);
  CHECK_THROWS_AS(m.require_nonempty_rows(), ContractError);
  m.set(1, 0);
  CHECK_NOTHROW(m.require_nonempty_rows());
}

TEST_CASE("layout validation and prompt alignment") {
  CHECK_THROWS_AS((BlockLayout{8, 10, 60}).validate(512), LayoutError);
  CHECK_THROWS_AS((BlockLayout{0, 1, 1}).validate(512), LayoutError);
  CHECK_THROWS_AS((BlockLayout{4, 1, 0}).validate(512), LayoutError);
  CHECK_NOTHROW((BlockLayout{8, 1, 63}).validate(512));
  const std::vector<int32_t> p = {1, 2, 3, 4, 5};
  CHECK(align_prompt(p, 4, 16) == std::vector<int32_t>{16, 16, 16, 1, 2, 3, 4, 5});
  CHECK(align_prompt(p, 5, 16) == p);
}

TEST_CASE("inference mask is block-causal up to the active block") {
  const BlockLayout L{3, 2, 3};
  for (int64_t a = 0; a < L.total_blocks(); ++a) {
    const MaskSpec m = inference_mask(L, a);
    CHECK(m.query_len() == (a + 1) * 3);
    CHECK(m.agrees_with(visibility_oracle(MaskKind::Inference, L, a)));
    for (int64_t i = 0; i < m.query_len(); ++i)
      for (int64_t j = 0; j < m.key_len(); ++j) CHECK(m(i, j) == (j / 3 <= i / 3));
  }
  CHECK_THROWS_AS(inference_mask(L, 5), LayoutError);
}

TEST_CASE("SFT expansions agree with the index oracle and the tag rule") {
  std::mt19937_64 rng(7);
  for (int64_t B : {1, 2, 4}) {
    for (int64_t P : {0, 1, 2}) {
      for (int64_t K : {1, 2, 3}) {
        const RandomSeq r = random_sequence(rng, B, P, K);
        for (RepeatMode mode : {RepeatMode::Blockwise, RepeatMode::OutputOnly}) {
          const ExpandedSequence s = sft_repeat_expansion(r.layout, r.clean, r.noisy, kMask, mode);
          const MaskKind kind = mode == RepeatMode::Blockwise ? MaskKind::SftBlockwise : MaskKind::SftOutputOnly;
          CHECK(s.mask.agrees_with(visibility_oracle(kind, r.layout)));
          bool ok = true;
          for (int64_t i = 0; i < s.size(); ++i)
            for (int64_t j = 0; j < s.size(); ++j) ok = ok && s.mask(i, j) == tag_rule(s, i, j, B);
          CHECK(ok);
          int64_t masked = 0;
          for (int64_t i = P * B; i < r.layout.total_len(); ++i) masked += r.noisy[static_cast<size_t>(i)] == kMask;
          CHECK(static_cast<int64_t>(s.loss_rows().size()) == masked);
          for (int64_t row : s.loss_rows()) {
            const auto k = static_cast<size_t>(row);
            CHECK(s.tokens[k] == kMask);
            CHECK(s.tags[k].kind == CopyKind::Noisy);
            CHECK(s.targets[k] == r.clean[static_cast<size_t>(s.positions[k])]);
          }
        }
      }
    }
  }
}

TEST_CASE("SFT expansion rejects inconsistent inputs") {
  const BlockLayout L{2, 1, 1};
  const std::vector<int32_t> clean = {1, 2, 3, 4};
  CHECK_THROWS_AS(sft_repeat_expansion(L, clean, std::vector<int32_t>{1, 2, 3}, kMask), LayoutError);
  CHECK_THROWS_AS(sft_repeat_expansion(L, clean, std::vector<int32_t>{1, 2, 9, 4}, kMask), LayoutError);
  CHECK_THROWS_AS(sft_repeat_expansion(BlockLayout{2, 1, 2}, clean, clean, kMask), LayoutError);
}

TEST_CASE("trace replay expansion follows the recorded steps") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 11, 20.0f);
  for (DecodeMode mode : {DecodeMode::Static, DecodeMode::Dynamic}) {
    DecodePolicy pol;
    pol.mode = mode;
    pol.threshold = 0.5f;
    pol.temperature = 1.0f;
    pol.max_new_tokens = 12;
    pol.seed = 3;
    const Trajectory t = generate(p, std::vector<int32_t>{1, 2, 10, 3, 4, 11}, pol);
    const BlockLayout L = trajectory_layout(t, 4);
    const ExpandedSequence s = trace_replay_expansion(L, t, kMask, 16);
    CHECK(s.mask.agrees_with(visibility_oracle(MaskKind::TraceReplay, L, 0, &t)));
    bool ok = true;
    for (int64_t i = 0; i < s.size(); ++i)
      for (int64_t j = 0; j < s.size(); ++j) ok = ok && s.mask(i, j) == tag_rule(s, i, j, 4);
    CHECK(ok);
    size_t tokens = 0;
    for (const StepRecord& r : t.steps) tokens += r.tokens.size();
    CHECK(s.loss_rows().size() == tokens);
    // Loss rows are still-masked slots targeting the token recorded at that step.
    for (int64_t row : s.loss_rows()) {
      const StepRecord& rec = t.steps[static_cast<size_t>(s.step_record[static_cast<size_t>(row)])];
      CHECK(s.tokens[static_cast<size_t>(row)] == kMask);
      CHECK(s.targets[static_cast<size_t>(row)] == rec.tokens[static_cast<size_t>(s.step_slot[static_cast<size_t>(row)])]);
    }
  }
}

TEST_CASE("trace validation catches corrupt traces") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 12, 20.0f);
  DecodePolicy pol;
  pol.max_new_tokens = 8;
  const Trajectory good = generate(p, std::vector<int32_t>{1, 10, 2, 11}, pol);
  CHECK_NOTHROW(validate_trace(good, 4));
  Trajectory gap = good;
  gap.steps.pop_back();
  CHECK_THROWS_AS(validate_trace(gap, 4), TraceError);
  Trajectory wrong = good;
  wrong.steps[0].tokens[0] = (wrong.steps[0].tokens[0] + 1) % 18;
  CHECK_THROWS_AS(validate_trace(wrong, 4), TraceError);
  Trajectory dup = good;
  dup.steps[1].positions[0] = dup.steps[0].positions[0];
  CHECK_THROWS_AS(validate_trace(dup, 4), TraceError);
}
