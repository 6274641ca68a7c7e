// SPDX-License-Identifier: Apache-2.0

#include "bdlm/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "bdlm/error.hpp"

namespace bdlm {

void DecodePolicy::validate() const {
  if (!(threshold > 0.0f && threshold <= 1.0f)) throw ConfigError("decode.threshold: must lie in (0, 1]");
  if (!(temperature >= 0.0f) || !std::isfinite(temperature)) throw ConfigError("decode.temperature: must be >= 0");
  if (max_new_tokens < 1) throw ConfigError("decode.max_new_tokens: must be >= 1");
}

void to_json(nlohmann::json& j, const DecodePolicy& p) {
  j = nlohmann::json{{"mode", p.mode == DecodeMode::Static ? "static" : "dynamic"},
                     {"threshold", p.threshold},
                     {"temperature", p.temperature},
                     {"max_new_tokens", p.max_new_tokens},
                     {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, DecodePolicy& p) {
  DecodePolicy d;
  const std::string mode = j.value("mode", std::string("static"));
  if (mode == "static") {
    d.mode = DecodeMode::Static;
  } else if (mode == "dynamic") {
    d.mode = DecodeMode::Dynamic;
  } else {
    throw ConfigError("decode.mode: expected 'static' or 'dynamic', got '" + mode + "'");
  }
  d.threshold = j.value("threshold", d.threshold);
  d.temperature = j.value("temperature", d.temperature);
  d.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
  d.seed = j.value("seed", d.seed);
  p = d;
}

std::vector<size_t> select_positions(std::span<const float> top1, const DecodePolicy& policy) {
  if (top1.empty()) return {};
  const size_t best = static_cast<size_t>(std::max_element(top1.begin(), top1.end()) - top1.begin());
  if (policy.mode == DecodeMode::Static) return {best};
  std::vector<size_t> out;
  for (size_t i = 0; i < top1.size(); ++i) {
    if (top1[i] > policy.threshold) out.push_back(i);
  }
  if (out.empty()) out.push_back(best);
  return out;
}

namespace {

struct StepChoice {
  std::vector<int64_t> local;  // block-relative positions
  std::vector<int32_t> tokens;
  std::vector<float> logprobs;
};

int32_t sample_index(std::span<const float> logp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (size_t i = 0; i < logp.size(); ++i) {
    acc += std::exp(static_cast<double>(logp[i]));
    if (u < acc) return static_cast<int32_t>(i);
  }
  // Rounding left u beyond the accumulated mass: take the last token with mass.
  for (size_t i = logp.size(); i-- > 0;) {
    if (std::isfinite(logp[i])) return static_cast<int32_t>(i);
  }
  return 0;
}

// `logits` points at the block's first row.
StepChoice choose_step(const float* logits, int64_t V, std::span<const uint8_t> decoded, const DecodePolicy& policy,
                       std::mt19937_64& rng) {
  std::vector<int64_t> masked;
  std::vector<std::vector<float>> logp;
  std::vector<float> top1;
  for (size_t j = 0; j < decoded.size(); ++j) {
    if (decoded[j]) continue;
    std::vector<float> row(logits + static_cast<int64_t>(j) * V, logits + static_cast<int64_t>(j + 1) * V);
    log_softmax_inplace(row);
    top1.push_back(std::exp(*std::max_element(row.begin(), row.end())));
    logp.push_back(std::move(row));
    masked.push_back(static_cast<int64_t>(j));
  }
  StepChoice c;
  for (size_t s : select_positions(top1, policy)) {
    const std::vector<float>& row = logp[s];
    int32_t token = 0;
    float lp = 0.0f;
    if (policy.temperature == 0.0f) {
      token = static_cast<int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      lp = row[static_cast<size_t>(token)];
    } else {
      std::vector<float> tempered(logits + masked[s] * V, logits + (masked[s] + 1) * V);
      for (float& x : tempered) x /= policy.temperature;
      log_softmax_inplace(tempered);
      token = sample_index(tempered, rng);
      lp = tempered[static_cast<size_t>(token)];
    }
    c.local.push_back(masked[s]);
    c.tokens.push_back(token);
    c.logprobs.push_back(lp);
  }
  return c;
}

StepRecord apply_step(const StepChoice& c, std::vector<int32_t>& state, std::vector<uint8_t>& decoded, int32_t block_index,
                      int32_t step, int64_t output_offset) {
  StepRecord rec;
  rec.block = block_index;
  rec.step = step;
  for (size_t i = 0; i < c.local.size(); ++i) {
    state[static_cast<size_t>(c.local[i])] = c.tokens[i];
    decoded[static_cast<size_t>(c.local[i])] = 1;
    rec.positions.push_back(static_cast<int32_t>(output_offset + c.local[i]));
  }
  rec.tokens = c.tokens;
  rec.logprobs = c.logprobs;
  return rec;
}

// Decoding can emit the mask id itself, so completion is tracked separately.
bool pending(std::span<const uint8_t> decoded) {
  return std::find(decoded.begin(), decoded.end(), 0) != decoded.end();
}

std::vector<int32_t> iota_positions(int64_t start, int64_t n) {
  std::vector<int32_t> p(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = static_cast<int32_t>(start + i);
  return p;
}

struct Plan {
  std::vector<int32_t> aligned;
  int64_t prompt_blocks = 0;
  int64_t max_blocks = 0;
};

Plan plan_generation(const ModelConfig& cfg, std::span<const int32_t> prompt, const DecodePolicy& policy) {
  policy.validate();
  const int64_t B = cfg.block_size;
  if (static_cast<int64_t>(prompt.size()) > cfg.max_seq_len) {
    throw LayoutError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  Plan p;
  p.aligned = align_prompt(prompt, B, cfg.pad_token_id);
  p.prompt_blocks = static_cast<int64_t>(p.aligned.size()) / B;
  const int64_t room = (cfg.max_seq_len - static_cast<int64_t>(p.aligned.size())) / B;
  if (room < 1) throw LayoutError("prompt leaves no room for an output block within max_seq_len");
  p.max_blocks = std::min((policy.max_new_tokens + B - 1) / B, room);
  return p;
}

void finish(Trajectory& t, bool saw_eos) {
  t.finish = saw_eos ? FinishReason::Eos : FinishReason::Length;
  t.stats.total_steps = static_cast<int64_t>(t.steps.size());
  t.stats.tokens_per_step = t.steps.empty() ? 0.0 : static_cast<double>(t.output.size()) / static_cast<double>(t.steps.size());
}

}  // namespace

DecodedBlock decode_block(const ModelParams& params, KvCache& cache, const DecodePolicy& policy, std::mt19937_64& rng,
                          int32_t block_index, int64_t output_offset) {
  const ModelConfig& cfg = params.config;
  const int64_t B = cfg.block_size;
  const std::vector<int32_t> positions = iota_positions(cache.length(), B);
  const MaskSpec intra = MaskSpec::all_visible(B, B);
  DecodedBlock out;
  std::vector<int32_t> state(static_cast<size_t>(B), cfg.mask_token_id);
  std::vector<uint8_t> decoded(static_cast<size_t>(B), 0);
  for (int32_t step = 0; pending(decoded); ++step) {
    const BlockForward f = forward_cached(params, cache, state, positions, intra);
    ++out.forward_calls;
    const StepChoice c = choose_step(f.logits.ptr(), cfg.vocab_size, decoded, policy, rng);
    out.steps.push_back(apply_step(c, state, decoded, block_index, step, output_offset));
  }
  cache.commit(forward_cached(params, cache, state, positions, intra));
  ++out.forward_calls;
  out.tokens = std::move(state);
  return out;
}

Trajectory generate(const ModelParams& params, std::span<const int32_t> prompt, const DecodePolicy& policy) {
  const ModelConfig& cfg = params.config;
  const int64_t B = cfg.block_size;
  const Plan plan = plan_generation(cfg, prompt, policy);
  Trajectory t;
  t.prompt.assign(prompt.begin(), prompt.end());
  t.temperature = policy.temperature;
  KvCache cache(cfg);
  if (!plan.aligned.empty()) {
    const BlockLayout layout{B, plan.prompt_blocks, 0};
    const MaskSpec mask = inference_mask(layout, plan.prompt_blocks - 1);
    cache.commit(forward_cached(params, cache, plan.aligned, iota_positions(0, plan.aligned.size()), mask));
  }
  std::mt19937_64 rng(policy.seed);
  bool saw_eos = false;
  for (int64_t k = 0; k < plan.max_blocks && !saw_eos; ++k) {
    DecodedBlock db = decode_block(params, cache, policy, rng, static_cast<int32_t>(k), k * B);
    saw_eos = std::find(db.tokens.begin(), db.tokens.end(), cfg.eos_token_id) != db.tokens.end();
    t.output.insert(t.output.end(), db.tokens.begin(), db.tokens.end());
    for (auto& s : db.steps) t.steps.push_back(std::move(s));
  }
  finish(t, saw_eos);
  return t;
}

Trajectory generate_uncached(const ModelParams& params, std::span<const int32_t> prompt, const DecodePolicy& policy) {
  const ModelConfig& cfg = params.config;
  const int64_t B = cfg.block_size;
  const Plan plan = plan_generation(cfg, prompt, policy);
  Trajectory t;
  t.prompt.assign(prompt.begin(), prompt.end());
  t.temperature = policy.temperature;
  std::vector<int32_t> prefix = plan.aligned;
  std::mt19937_64 rng(policy.seed);
  bool saw_eos = false;
  for (int64_t k = 0; k < plan.max_blocks && !saw_eos; ++k) {
    const BlockLayout layout{B, plan.prompt_blocks, k + 1};
    const MaskSpec mask = inference_mask(layout, plan.prompt_blocks + k);
    const auto start = static_cast<int64_t>(prefix.size());
    std::vector<int32_t> state(static_cast<size_t>(B), cfg.mask_token_id);
    std::vector<uint8_t> decoded(static_cast<size_t>(B), 0);
    for (int32_t step = 0; pending(decoded); ++step) {
      std::vector<int32_t> tokens = prefix;
      tokens.insert(tokens.end(), state.begin(), state.end());
      const Tensor logits = forward(params, tokens, iota_positions(0, tokens.size()), mask);
      const StepChoice c =
          choose_step(logits.ptr() + start * cfg.vocab_size, cfg.vocab_size, decoded, policy, rng);
      t.steps.push_back(apply_step(c, state, decoded, static_cast<int32_t>(k), step, k * B));
    }
    saw_eos = std::find(state.begin(), state.end(), cfg.eos_token_id) != state.end();
    prefix.insert(prefix.end(), state.begin(), state.end());
    t.output.insert(t.output.end(), state.begin(), state.end());
  }
  finish(t, saw_eos);
  return t;
}

Var replay_logprobs_on_tape(const BoundParams& params, std::span<const Trajectory* const> trajectories,
                            std::vector<ReplayToken>& index) {
  const ModelConfig& cfg = params.config();
  index.clear();
  std::vector<int32_t> tokens, positions, targets;
  std::vector<MaskSpec> masks;
  std::vector<int64_t> rows;
  for (size_t ti = 0; ti < trajectories.size(); ++ti) {
    const Trajectory& traj = *trajectories[ti];
    const BlockLayout layout = trajectory_layout(traj, cfg.block_size);
    ExpandedSequence e = trace_replay_expansion(layout, traj, cfg.mask_token_id, cfg.pad_token_id);
    const auto offset = static_cast<int64_t>(tokens.size());
    for (int64_t r : e.loss_rows()) {
      const auto row = static_cast<size_t>(r);
      rows.push_back(offset + r);
      targets.push_back(e.targets[row]);
      index.push_back(ReplayToken{static_cast<int32_t>(ti), e.step_record[row], e.step_slot[row]});
    }
    tokens.insert(tokens.end(), e.tokens.begin(), e.tokens.end());
    positions.insert(positions.end(), e.positions.begin(), e.positions.end());
    masks.push_back(std::move(e.mask));
  }
  if (tokens.empty()) return params.tape().constant(Tensor::zeros({0}));
  const Var logits = forward_on_tape(params, tokens, positions, AttentionMask::packed(masks));
  // Behavior log-probs were taken from the tempered distribution when sampling.
  bool tempered = false;
  for (const Trajectory* t : trajectories) tempered = tempered || (t->temperature > 0.0f && t->temperature != 1.0f);
  if (!tempered) return token_logprobs(logits, rows, targets);
  const int64_t V = cfg.vocab_size;
  std::vector<float> inv(rows.size() * static_cast<size_t>(V));
  std::vector<int64_t> identity(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    const float T = trajectories[static_cast<size_t>(index[i].trajectory)]->temperature;
    std::fill_n(inv.begin() + static_cast<std::ptrdiff_t>(i) * V, V, T > 0.0f ? 1.0f / T : 1.0f);
    identity[i] = static_cast<int64_t>(i);
  }
  const Var scaled = mul(select_rows(logits, rows), params.tape().constant(Tensor({static_cast<int64_t>(rows.size()), V}, std::move(inv))));
  return token_logprobs(scaled, identity, targets);
}

std::vector<std::vector<float>> replay_logprobs(const ModelParams& params, const Trajectory& trajectory) {
  Tape tape(false);
  BoundParams bound(tape, params, false);
  std::vector<ReplayToken> index;
  const Trajectory* one[] = {&trajectory};
  const Var lp = replay_logprobs_on_tape(bound, one, index);
  std::vector<std::vector<float>> out(trajectory.steps.size());
  for (size_t s = 0; s < trajectory.steps.size(); ++s) out[s].resize(trajectory.steps[s].positions.size());
  const auto values = lp.value().data();
  for (size_t i = 0; i < index.size(); ++i) {
    out[static_cast<size_t>(index[i].step)][static_cast<size_t>(index[i].slot)] = values[i];
  }
  return out;
}

}  // namespace bdlm
