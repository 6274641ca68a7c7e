// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace bdlm::cli {

struct CommandContext {
  RunConfig config;
  std::filesystem::path out = "runs/default";
  std::optional<std::filesystem::path> checkpoint;  // overrides the stage's default input
  std::optional<std::string> connect;              // host:port of an external rollout service
  std::ostream* log = nullptr;                     // progress lines; null = quiet
};

// Artifact layout under `out`.
std::filesystem::path train_data_path(const std::filesystem::path& out);
std::filesystem::path eval_data_path(const std::filesystem::path& out);
std::filesystem::path sft_checkpoint_path(const std::filesystem::path& out);
std::filesystem::path rl_checkpoint_path(const std::filesystem::path& out);

struct SftOutcome {
  double final_loss = 0.0;
  double eval_accuracy = 0.0;  // greedy static pass rate on the eval split
  double wall_s = 0.0;
};

struct RlOutcome {
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
  double wall_s = 0.0;
};

void run_gen_data(const CommandContext& ctx);
SftOutcome run_sft(const CommandContext& ctx);
RlOutcome run_rl(const CommandContext& ctx);
std::vector<EvalResult> run_eval(const CommandContext& ctx);
void run_serve(const CommandContext& ctx);

struct BenchMaskRow {
  std::string mode;
  int64_t block_size = 0;
  int64_t blocks = 0;
  int64_t forward_calls = 0;
  double wall_ms = 0.0;
  float max_abs_diff = 0.0f;  // against the sequential logits (0 for the sequential row)
};

/// Expanded single-forward SFT loss (both repeat layouts) against sequential
/// per-block forwards over B in {1, 2, 4} and K in {1, 2, 3}.
std::vector<BenchMaskRow> bench_mask(const ModelConfig& base, int64_t batch, uint64_t seed);
std::vector<BenchMaskRow> run_bench_mask(const CommandContext& ctx);

struct LoopTiming {
  std::string loop;  // "baseline" or "dirl"
  int run = 0;
  double load_ms = 0.0;
  double rollout_ms = 0.0;
  double train_ms = 0.0;
  double update_ms = 0.0;  // save for the baseline, in-place push for DiRL
  int loads = 0;
  int saves = 0;

  double total_ms() const { return load_ms + rollout_ms + train_ms + update_ms; }
};

struct BenchLoopResult {
  std::vector<LoopTiming> steps;
  double inplace_update_ms = 0.0;  // mean per in-place update
  double save_load_ms = 0.0;       // mean per save + load round trip
};

/// The benchmark step: one prompt with a group of 4 rollouts (batch size 4).
DipoConfig bench_loop_config(const DipoConfig& rl);

/// RL steps from identical weights and seeds. After one unrecorded warm-up
/// pair, each run interleaves `steps_per_run` baseline and DiRL steps and
/// reports each loop's median-total step.
BenchLoopResult bench_loop(const ModelParams& start, const DipoConfig& rl, const std::vector<tasks::TaskSample>& prompts,
                           int runs, const std::filesystem::path& scratch, int steps_per_run = 7);
BenchLoopResult run_bench_loop(const CommandContext& ctx, int runs);

}  // namespace bdlm::cli
