// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bdlm/decoder.hpp"
#include "bdlm/model.hpp"
#include "bdlm/optim.hpp"
#include "bdlm/rollout_service.hpp"
#include "bdlm/tasks.hpp"
#include "json.hpp"

namespace bdlm {

enum class DipoObjective { SequenceWithKl, TokenLevel };

struct DipoConfig {
  int64_t group_size = 8;
  float clip_eps = 0.2f;
  float kl_beta = 0.0f;
  DipoObjective objective = DipoObjective::TokenLevel;
  float lr = 2e-5f;
  int64_t steps = 40;
  int64_t batch_prompts = 16;
  float weight_decay = 0.0f;
  float beta1 = 0.9f;
  float beta2 = 0.99f;
  float grad_clip = 1.0f;
  int64_t warmup = 0;  // linear lr warmup steps, constant afterwards
  int64_t train_chunk = 16;  // trajectories per forward/backward
  uint64_t seed = 0;
  DecodePolicy rollout{DecodeMode::Dynamic, 0.9f, 1.0f, 48, 0};

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const DipoConfig& c);
void from_json(const nlohmann::json& j, DipoConfig& c);

/// A_i = r_i - mean(r).
std::vector<double> compute_advantages(std::span<const double> rewards);

struct RolloutGroup {
  std::vector<int32_t> prompt;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

struct DipoDiagnostics {
  double objective = 0.0;  // J before negation
  double clip_frac = 0.0;
  double kl = 0.0;         // mean per-token estimator
  int64_t tokens = 0;      // loss tokens after EOS filtering
  int64_t steps = 0;       // decoding steps holding at least one loss token
};

struct DipoLossResult {
  double loss = 0.0;  // -J
  GradMap grads;
  DipoDiagnostics diag;
};

/// Clipped surrogate over every decoded token up to the first EOS, with the
/// ratio pi_theta / sg(pi_theta) computed through trace replay. `reference`
/// is required when kl_beta > 0. When `frozen` is given its replay log-probs
/// replace sg(log pi_theta) as the ratio denominator.
DipoLossResult dipo_loss(const ModelParams& params, const std::vector<RolloutGroup>& groups, const ModelParams* reference,
                         const DipoConfig& config, bool with_grad = true, const ModelParams* frozen = nullptr);

/// Where rollouts come from: the in-process service or a socket client.
class RolloutBackend {
 public:
  virtual ~RolloutBackend() = default;
  virtual std::vector<GenerateItem> generate(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy) = 0;
  virtual uint64_t update_weights(const ModelParams& params) = 0;
};

class InProcessBackend : public RolloutBackend {
 public:
  explicit InProcessBackend(RolloutService& service) : service_(service) {}
  std::vector<GenerateItem> generate(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy) override {
    return service_.generate_batch(prompts, policy);
  }
  uint64_t update_weights(const ModelParams& params) override { return service_.update_weights(params); }

 private:
  RolloutService& service_;
};

class RemoteBackend : public RolloutBackend {
 public:
  explicit RemoteBackend(ServiceClient& client) : client_(client) {}
  std::vector<GenerateItem> generate(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy) override {
    return client_.generate(prompts, policy);
  }
  uint64_t update_weights(const ModelParams& params) override { return client_.update_weights(params); }

 private:
  ServiceClient& client_;
};

struct TrainStepReport {
  int64_t step = 0;
  double mean_reward = 0.0;
  double pass_rate = 0.0;  // fraction of prompts with at least one correct rollout
  double tokens_per_step = 0.0;
  double clip_frac = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;
  double rollout_ms = 0.0;
  double train_ms = 0.0;
  double update_ms = 0.0;
  uint64_t version = 0;  // service version after the push
};

std::string train_report_csv_header();
std::string to_csv_row(const TrainStepReport& r);

struct RlState {
  OptimState optim;
  ModelParams reference;  // frozen at RL start
};

RlState make_rl_state(const ModelParams& params, const DipoConfig& config);

/// One online step: rollouts -> rewards -> advantages -> loss -> AdamW ->
/// weight push. A failed service call is retried once before the step aborts
/// with ServiceError.
TrainStepReport rl_train_step(RolloutBackend& backend, ModelParams& params, RlState& state, const DipoConfig& config,
                              const std::vector<tasks::TaskSample>& prompts, int64_t step);

using RlCallback = std::function<void(const TrainStepReport&, const ModelParams&)>;

/// Runs config.steps steps, drawing config.batch_prompts prompts per step.
std::vector<TrainStepReport> rl_train(RolloutBackend& backend, ModelParams& params, const DipoConfig& config,
                                      const std::vector<tasks::TaskSample>& train_set, const RlCallback& on_step = {});

struct EvalResult {
  std::string policy;  // "static" or "dynamic"
  float threshold = 0.0f;
  double accuracy = 0.0;
  double tokens_per_step = 0.0;
  double avg_length = 0.0;
  int64_t n = 0;
};

EvalResult evaluate(const ModelParams& params, const std::vector<tasks::TaskSample>& samples, const DecodePolicy& policy);

/// Greedy static row followed by one greedy dynamic row per threshold.
std::vector<EvalResult> evaluate_sweep(const ModelParams& params, const std::vector<tasks::TaskSample>& samples,
                                       int64_t max_new_tokens, std::span<const float> thresholds);

std::string eval_csv_header();
std::string to_csv_row(const EvalResult& r);

}  // namespace bdlm
