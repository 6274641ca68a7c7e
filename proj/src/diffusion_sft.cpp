// SPDX-License-Identifier: Apache-2.0

#include "bdlm/diffusion_sft.hpp"

#include <chrono>
#include <cmath>

#include "bdlm/error.hpp"

namespace bdlm {

NoisedBlock noise_block(std::span<const int32_t> block, float t, int32_t mask_token_id, const DiffusionSchedule& schedule,
                        std::mt19937_64& rng) {
  if (!(t >= 0.0f && t <= 1.0f)) throw ContractError("noise level t must lie in [0, 1]");
  const float p_mask = 1.0f - schedule.alpha(t);
  std::uniform_real_distribution<float> unif(0.0f, 1.0f);
  NoisedBlock out{std::vector<int32_t>(block.begin(), block.end()), std::vector<uint8_t>(block.size(), 0)};
  bool any = false;
  for (size_t i = 0; i < block.size(); ++i) {
    if (unif(rng) < p_mask) {
      out.tokens[i] = mask_token_id;
      out.masked[i] = 1;
      any = true;
    }
  }
  if (!any && t > 0.0f && !block.empty()) {
    std::uniform_int_distribution<size_t> pick(0, block.size() - 1);
    const size_t i = pick(rng);
    out.tokens[i] = mask_token_id;
    out.masked[i] = 1;
  }
  return out;
}

int64_t NoisyBatch::masked_count() const {
  int64_t n = 0;
  for (const auto& s : items) {
    for (uint8_t m : s.masked) n += m;
  }
  return n;
}

int64_t NoisyBatch::output_tokens() const {
  int64_t n = 0;
  for (const auto& s : items) n += s.layout.output_len();
  return n;
}

namespace {

NoisySequence aligned_sequence(const ModelConfig& cfg, std::span<const int32_t> prompt, std::span<const int32_t> response) {
  const int64_t B = cfg.block_size;
  NoisySequence seq;
  seq.clean = align_prompt(prompt, B, cfg.pad_token_id);
  seq.layout.block_size = B;
  seq.layout.prompt_blocks = static_cast<int64_t>(seq.clean.size()) / B;
  std::vector<int32_t> out(response.begin(), response.end());
  if (out.empty()) out.push_back(cfg.eos_token_id);
  while (static_cast<int64_t>(out.size()) % B != 0) out.push_back(cfg.eos_token_id);
  seq.layout.output_blocks = static_cast<int64_t>(out.size()) / B;
  seq.layout.validate(cfg.max_seq_len);
  seq.clean.insert(seq.clean.end(), out.begin(), out.end());
  seq.noisy = seq.clean;
  seq.masked.assign(seq.clean.size(), 0);
  return seq;
}

}  // namespace

NoisySequence make_noisy_sequence(const ModelConfig& cfg, std::span<const int32_t> prompt, std::span<const int32_t> response,
                                  const DiffusionSchedule& schedule, std::mt19937_64& rng) {
  NoisySequence seq = aligned_sequence(cfg, prompt, response);
  const int64_t B = cfg.block_size;
  std::uniform_real_distribution<float> unif(0.0f, 1.0f);
  for (int64_t k = 0; k < seq.layout.output_blocks; ++k) {
    const float t = 1.0f - unif(rng);  // (0, 1]
    seq.block_t.push_back(t);
    const int64_t start = seq.layout.prompt_len() + k * B;
    const auto block = std::span<const int32_t>(seq.clean).subspan(static_cast<size_t>(start), static_cast<size_t>(B));
    NoisedBlock nb = noise_block(block, t, cfg.mask_token_id, schedule, rng);
    for (int64_t j = 0; j < B; ++j) {
      seq.noisy[static_cast<size_t>(start + j)] = nb.tokens[static_cast<size_t>(j)];
      seq.masked[static_cast<size_t>(start + j)] = nb.masked[static_cast<size_t>(j)];
    }
  }
  return seq;
}

NoisySequence make_noisy_sequence(const ModelConfig& cfg, std::span<const int32_t> prompt, std::span<const int32_t> response,
                                  std::span<const float> block_t, std::span<const uint8_t> output_masked) {
  NoisySequence seq = aligned_sequence(cfg, prompt, response);
  if (static_cast<int64_t>(block_t.size()) != seq.layout.output_blocks) throw LayoutError("one noise level per output block required");
  if (static_cast<int64_t>(output_masked.size()) != seq.layout.output_len()) throw LayoutError("mask indicator must cover the output region");
  seq.block_t.assign(block_t.begin(), block_t.end());
  const int64_t base = seq.layout.prompt_len();
  for (size_t i = 0; i < output_masked.size(); ++i) {
    if (output_masked[i]) {
      seq.noisy[static_cast<size_t>(base) + i] = cfg.mask_token_id;
      seq.masked[static_cast<size_t>(base) + i] = 1;
    }
  }
  return seq;
}

namespace {

struct PackedSft {
  std::vector<int32_t> tokens, positions;
  std::vector<MaskSpec> masks;
  std::vector<int64_t> loss_rows;
  std::vector<int32_t> targets;
  std::vector<float> weights;
};

PackedSft pack_batch(const ModelConfig& cfg, const NoisyBatch& batch, const DiffusionSchedule& schedule, RepeatMode mode) {
  PackedSft p;
  for (const NoisySequence& s : batch.items) {
    ExpandedSequence e = sft_repeat_expansion(s.layout, s.clean, s.noisy, cfg.mask_token_id, mode);
    const auto offset = static_cast<int64_t>(p.tokens.size());
    for (int64_t r : e.loss_rows()) {
      const auto row = static_cast<size_t>(r);
      const int64_t out_block = e.tags[row].block - s.layout.prompt_blocks;
      p.loss_rows.push_back(offset + r);
      p.targets.push_back(e.targets[row]);
      p.weights.push_back(schedule.weight(s.block_t[static_cast<size_t>(out_block)]));
    }
    p.tokens.insert(p.tokens.end(), e.tokens.begin(), e.tokens.end());
    p.positions.insert(p.positions.end(), e.positions.begin(), e.positions.end());
    p.masks.push_back(std::move(e.mask));
  }
  return p;
}

}  // namespace

LossResult sft_loss(const ModelParams& params, const NoisyBatch& batch, const DiffusionSchedule& schedule, bool with_grad,
                    RepeatMode mode) {
  LossResult result;
  if (batch.items.empty()) return result;
  PackedSft p = pack_batch(params.config, batch, schedule, mode);
  Tape tape(with_grad);
  BoundParams bound(tape, params, with_grad);
  Var logits = forward_on_tape(bound, p.tokens, p.positions, AttentionMask::packed(p.masks));
  Var loss = softmax_cross_entropy(select_rows(logits, p.loss_rows), p.targets, p.weights, Reduction::WeightedMean);
  result.loss = loss.value().item();
  result.loss_tokens = static_cast<int64_t>(p.loss_rows.size());
  result.forward_calls = 1;
  if (with_grad) {
    tape.backward(loss);
    result.grads = bound.grads();
  }
  return result;
}

Tensor expanded_loss_logits(const ModelParams& params, const NoisySequence& seq, RepeatMode mode) {
  ExpandedSequence e = sft_repeat_expansion(seq.layout, seq.clean, seq.noisy, params.config.mask_token_id, mode);
  Tape tape(false);
  BoundParams bound(tape, params, false);
  Var logits = forward_on_tape(bound, e.tokens, e.positions, AttentionMask(e.mask));
  return select_rows(logits, e.loss_rows()).value();
}

namespace {

// Calls fn(block_logits, first_row_of_block_in_sequence) once per output block.
template <typename Fn>
void for_each_sequential_block(const ModelParams& params, const NoisySequence& seq, Fn&& fn) {
  const int64_t B = seq.layout.block_size;
  for (int64_t k = 0; k < seq.layout.output_blocks; ++k) {
    const int64_t active = seq.layout.prompt_blocks + k;
    const int64_t start = active * B;
    std::vector<int32_t> tokens(seq.clean.begin(), seq.clean.begin() + start);
    tokens.insert(tokens.end(), seq.noisy.begin() + start, seq.noisy.begin() + start + B);
    std::vector<int32_t> positions(tokens.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int32_t>(i);
    const Tensor logits = forward(params, tokens, positions, inference_mask(seq.layout, active));
    fn(logits, start, k);
  }
}

}  // namespace

Tensor sequential_loss_logits(const ModelParams& params, const NoisySequence& seq) {
  const int64_t V = params.config.vocab_size;
  const int64_t B = seq.layout.block_size;
  std::vector<float> rows;
  int64_t n = 0;
  for_each_sequential_block(params, seq, [&](const Tensor& logits, int64_t start, int64_t) {
    for (int64_t j = 0; j < B; ++j) {
      if (!seq.masked[static_cast<size_t>(start + j)]) continue;
      rows.insert(rows.end(), logits.ptr() + (start + j) * V, logits.ptr() + (start + j + 1) * V);
      ++n;
    }
  });
  return Tensor({n, V}, std::move(rows));
}

LossResult sft_loss_sequential(const ModelParams& params, const NoisyBatch& batch, const DiffusionSchedule& schedule) {
  const int64_t V = params.config.vocab_size;
  const int64_t B = params.config.block_size;
  double weighted = 0.0, weight_total = 0.0;
  LossResult result;
  for (const NoisySequence& seq : batch.items) {
    for_each_sequential_block(params, seq, [&](const Tensor& logits, int64_t start, int64_t k) {
      ++result.forward_calls;
      const float w = schedule.weight(seq.block_t[static_cast<size_t>(k)]);
      for (int64_t j = 0; j < B; ++j) {
        const auto pos = static_cast<size_t>(start + j);
        if (!seq.masked[pos]) continue;
        std::vector<float> row(logits.ptr() + (start + j) * V, logits.ptr() + (start + j + 1) * V);
        log_softmax_inplace(row);
        weighted += static_cast<double>(w) * -row[static_cast<size_t>(seq.clean[pos])];
        weight_total += w;
        ++result.loss_tokens;
      }
    });
  }
  result.loss = weight_total > 0.0 ? weighted / weight_total : 0.0;
  return result;
}

void SftConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("sft." + field + ": " + why); };
  if (steps < 1) fail("steps", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(lr > 0.0f)) fail("lr", "must be > 0");
  if (warmup < 0) fail("warmup", "must be >= 0");
  if (weight_decay < 0.0f) fail("weight_decay", "must be >= 0");
  if (!(beta1 >= 0.0f && beta1 < 1.0f)) fail("beta1", "must be in [0, 1)");
  if (!(beta2 >= 0.0f && beta2 < 1.0f)) fail("beta2", "must be in [0, 1)");
  if (grad_clip < 0.0f) fail("grad_clip", "must be >= 0 (0 disables clipping)");
}

void to_json(nlohmann::json& j, const SftConfig& c) {
  j = nlohmann::json{{"steps", c.steps},         {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"warmup", c.warmup},       {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
                     {"beta2", c.beta2},         {"grad_clip", c.grad_clip},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SftConfig& c) {
  SftConfig d;
  d.steps = j.value("steps", d.steps);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.warmup = j.value("warmup", d.warmup);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.grad_clip = j.value("grad_clip", d.grad_clip);
  d.seed = j.value("seed", d.seed);
  c = d;
}

std::vector<SftStepMetrics> sft_train(ModelParams& params, const SftConfig& config, const std::vector<SftExample>& dataset,
                                      const DiffusionSchedule& schedule, const SftCallback& on_step) {
  if (dataset.empty()) throw ConfigError("sft: dataset is empty");
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
  OptimState opt;
  opt.hp = AdamWConfig{config.lr, config.beta1, config.beta2, 1e-8f, config.weight_decay};
  std::vector<SftStepMetrics> metrics;
  metrics.reserve(static_cast<size_t>(config.steps));
  for (int64_t step = 0; step < config.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    NoisyBatch batch;
    for (int64_t b = 0; b < config.batch_size; ++b) {
      const SftExample& ex = dataset[pick(rng)];
      batch.items.push_back(make_noisy_sequence(params.config, ex.prompt, ex.response, schedule, rng));
    }
    LossResult r = sft_loss(params, batch, schedule, true);
    if (!std::isfinite(r.loss)) {
      throw NumericError("sft: non-finite loss at step " + std::to_string(step));
    }
    clip_grad_norm(r.grads, config.grad_clip);
    const float lr = cosine_lr(config.lr, step, config.steps, config.warmup);
    optimizer_step(params.tensors, r.grads, opt, lr);
    SftStepMetrics m;
    m.step = step;
    m.loss = r.loss;
    m.lr = lr;
    m.masked_frac = static_cast<double>(batch.masked_count()) / static_cast<double>(batch.output_tokens());
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics.push_back(m);
    if (on_step) on_step(m, params);
  }
  return metrics;
}

}  // namespace bdlm
