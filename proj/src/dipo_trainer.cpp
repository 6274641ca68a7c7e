// SPDX-License-Identifier: Apache-2.0

#include "bdlm/dipo_trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "bdlm/error.hpp"

namespace bdlm {

using nlohmann::json;

void DipoConfig::validate() const {
  if (group_size < 2) throw ConfigError("rl.group_size: must be >= 2");
  if (!(clip_eps > 0.0f && clip_eps < 1.0f)) throw ConfigError("rl.clip_eps: must lie in (0, 1)");
  if (!(kl_beta >= 0.0f)) throw ConfigError("rl.kl_beta: must be >= 0");
  if (!(lr > 0.0f)) throw ConfigError("rl.lr: must be > 0");
  if (steps < 1) throw ConfigError("rl.steps: must be >= 1");
  if (batch_prompts < 1) throw ConfigError("rl.batch_prompts: must be >= 1");
  if (warmup < 0) throw ConfigError("rl.warmup: must be >= 0");
  if (train_chunk < 1) throw ConfigError("rl.train_chunk: must be >= 1");
  if (!(grad_clip > 0.0f)) throw ConfigError("rl.grad_clip: must be > 0");
  rollout.validate();
}

void to_json(json& j, const DipoConfig& c) {
  j = json{{"group_size", c.group_size},
           {"clip_eps", c.clip_eps},
           {"kl_beta", c.kl_beta},
           {"objective", c.objective == DipoObjective::TokenLevel ? "token_level" : "sequence_with_kl"},
           {"lr", c.lr},
           {"steps", c.steps},
           {"batch_prompts", c.batch_prompts},
           {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"grad_clip", c.grad_clip},
           {"warmup", c.warmup},
           {"train_chunk", c.train_chunk},
           {"seed", c.seed},
           {"rollout", c.rollout}};
}

void from_json(const json& j, DipoConfig& c) {
  DipoConfig d;
  d.group_size = j.value("group_size", d.group_size);
  d.clip_eps = j.value("clip_eps", d.clip_eps);
  d.kl_beta = j.value("kl_beta", d.kl_beta);
  const std::string obj = j.value("objective", std::string("token_level"));
  if (obj == "token_level") {
    d.objective = DipoObjective::TokenLevel;
  } else if (obj == "sequence_with_kl") {
    d.objective = DipoObjective::SequenceWithKl;
  } else {
    throw ConfigError("rl.objective: expected 'token_level' or 'sequence_with_kl', got '" + obj + "'");
  }
  d.lr = j.value("lr", d.lr);
  d.steps = j.value("steps", d.steps);
  d.batch_prompts = j.value("batch_prompts", d.batch_prompts);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.grad_clip = j.value("grad_clip", d.grad_clip);
  d.warmup = j.value("warmup", d.warmup);
  d.train_chunk = j.value("train_chunk", d.train_chunk);
  d.seed = j.value("seed", d.seed);
  if (j.contains("rollout")) j.at("rollout").get_to(d.rollout);
  c = d;
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.empty()) return {};
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back(r - mean);
  return out;
}

namespace {

struct FlatTrajectory {
  const Trajectory* trajectory;
  double advantage;
};

std::vector<float> replay_values(const ModelParams& params, std::span<const Trajectory* const> trajs) {
  Tape tape(false);
  BoundParams bound(tape, params, false);
  std::vector<ReplayToken> index;
  const Var lp = replay_logprobs_on_tape(bound, trajs, index);
  return lp.value().to_vector();
}

}  // namespace

DipoLossResult dipo_loss(const ModelParams& params, const std::vector<RolloutGroup>& groups, const ModelParams* reference,
                         const DipoConfig& config, bool with_grad, const ModelParams* frozen) {
  config.validate();
  const bool use_kl = config.objective == DipoObjective::SequenceWithKl && config.kl_beta > 0.0f;
  if (use_kl && reference == nullptr) throw ContractError("dipo_loss: KL term needs reference params");
  const int32_t eos = params.config.eos_token_id;

  std::vector<FlatTrajectory> flat;
  int64_t n_tokens = 0, n_steps = 0;
  for (const RolloutGroup& g : groups) {
    if (g.advantages.size() != g.trajectories.size()) throw ContractError("dipo_loss: one advantage per trajectory required");
    for (size_t i = 0; i < g.trajectories.size(); ++i) {
      const Trajectory& t = g.trajectories[i];
      if (t.steps.empty() && !t.output.empty()) throw TraceError("dipo_loss: trajectory has no decoding trace");
      const int64_t limit = t.first_eos(eos);
      for (const StepRecord& s : t.steps) {
        const auto kept = std::count_if(s.positions.begin(), s.positions.end(), [&](int32_t p) { return p <= limit; });
        n_tokens += kept;
        n_steps += kept > 0 ? 1 : 0;
      }
      flat.push_back({&t, g.advantages[i]});
    }
  }

  DipoLossResult result;
  result.diag.tokens = n_tokens;
  result.diag.steps = n_steps;
  if (n_tokens == 0) return result;
  const double norm = config.objective == DipoObjective::TokenLevel ? static_cast<double>(n_tokens)
                                                                        : static_cast<double>(n_steps);
  const float eps = config.clip_eps;
  int64_t clipped = 0;
  double kl_total = 0.0, objective = 0.0;

  const auto chunk = static_cast<size_t>(config.train_chunk);
  for (size_t begin = 0; begin < flat.size(); begin += chunk) {
    const size_t end = std::min(flat.size(), begin + chunk);
    std::vector<const Trajectory*> trajs;
    for (size_t i = begin; i < end; ++i) trajs.push_back(flat[i].trajectory);

    Tape tape(with_grad);
    BoundParams bound(tape, params, with_grad);
    std::vector<ReplayToken> index;
    const Var logp = replay_logprobs_on_tape(bound, trajs, index);
    const auto n = static_cast<int64_t>(index.size());
    if (n == 0) continue;
    if (!logp.value().all_finite()) throw NumericError("dipo_loss: non-finite log-probability in replay");

    std::vector<float> adv(static_cast<size_t>(n)), keep(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
      const ReplayToken& rt = index[static_cast<size_t>(k)];
      const FlatTrajectory& ft = flat[begin + static_cast<size_t>(rt.trajectory)];
      const int32_t pos = ft.trajectory->steps[static_cast<size_t>(rt.step)].positions[static_cast<size_t>(rt.slot)];
      const bool kept = pos <= ft.trajectory->first_eos(eos);
      keep[static_cast<size_t>(k)] = kept ? 1.0f : 0.0f;
      adv[static_cast<size_t>(k)] = kept ? static_cast<float>(ft.advantage) : 0.0f;
    }
    const Var adv_v = tape.constant(Tensor({n}, adv));
    const Var keep_v = tape.constant(Tensor({n}, keep));

    const Var denom = frozen != nullptr ? tape.constant(Tensor({n}, replay_values(*frozen, trajs))) : stop_gradient(logp);
    const Var ratio = exp(sub(logp, denom));
    if (!ratio.value().all_finite()) throw NumericError("dipo_loss: non-finite importance ratio");
    const Var term = minimum(mul(ratio, adv_v), mul(clamp(ratio, 1.0f - eps, 1.0f + eps), adv_v));
    Var j = scale(sum(term), static_cast<float>(1.0 / norm));

    const auto r = ratio.value().data();
    for (int64_t k = 0; k < n; ++k) {
      const auto u = static_cast<size_t>(k);
      if (keep[u] == 0.0f) continue;
      if ((adv[u] > 0.0f && r[u] > 1.0f + eps) || (adv[u] < 0.0f && r[u] < 1.0f - eps)) ++clipped;
    }

    if (reference != nullptr) {
      const Var ref = tape.constant(Tensor({n}, replay_values(*reference, trajs)));
      const Var delta = sub(ref, logp);
      const Var kl = mul(add_scalar(sub(exp(delta), delta), -1.0f), keep_v);
      const Var kl_sum = sum(kl);
      kl_total += kl_sum.value().item();
      if (use_kl) j = sub(j, scale(kl_sum, static_cast<float>(config.kl_beta / static_cast<double>(n_tokens))));
    }
    objective += j.value().item();
    if (with_grad) {
      const Var loss = scale(j, -1.0f);
      tape.backward(loss);
      accumulate_grads(result.grads, bound.grads());
    }
  }
  result.loss = -objective;
  result.diag.objective = objective;
  result.diag.clip_frac = static_cast<double>(clipped) / static_cast<double>(n_tokens);
  result.diag.kl = kl_total / static_cast<double>(n_tokens);
  return result;
}

// ---- training loop ---------------------------------------------------------

std::string train_report_csv_header() {
  return "step,mean_reward,pass_rate,clip_frac,kl,grad_norm,rollout_ms,train_ms,update_ms,tokens_per_step,version";
}

std::string to_csv_row(const TrainStepReport& r) {
  std::ostringstream os;
  os << r.step << ',' << r.mean_reward << ',' << r.pass_rate << ',' << r.clip_frac << ',' << r.kl << ',' << r.grad_norm << ','
     << r.rollout_ms << ',' << r.train_ms << ',' << r.update_ms << ',' << r.tokens_per_step << ',' << r.version;
  return os.str();
}

RlState make_rl_state(const ModelParams& params, const DipoConfig& config) {
  RlState s;
  s.optim.hp = AdamWConfig{config.lr, config.beta1, config.beta2, 1e-8f, config.weight_decay};
  s.reference = params;
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

template <typename Fn>
auto with_retry(const char* what, Fn&& fn) {
  try {
    return fn();
  } catch (const ServiceError&) {
  }
  try {
    return fn();
  } catch (const ServiceError& e) {
    throw ServiceError(std::string(what) + " failed twice, step aborted: " + e.what());
  }
}

}  // namespace

TrainStepReport rl_train_step(RolloutBackend& backend, ModelParams& params, RlState& state, const DipoConfig& config,
                              const std::vector<tasks::TaskSample>& prompts, int64_t step) {
  config.validate();
  TrainStepReport rep;
  rep.step = step;
  const auto G = static_cast<size_t>(config.group_size);

  auto t0 = Clock::now();
  std::vector<std::vector<int32_t>> batch;
  batch.reserve(prompts.size() * G);
  for (const auto& s : prompts) {
    const std::vector<int32_t> p = s.prompt_tokens();
    for (size_t g = 0; g < G; ++g) batch.push_back(p);
  }
  DecodePolicy policy = config.rollout;
  policy.seed = config.seed * 1000003ULL + static_cast<uint64_t>(step) * 7919ULL * (batch.size() + 1);
  const std::vector<GenerateItem> items = with_retry("rollout", [&] { return backend.generate(batch, policy); });
  if (items.size() != batch.size()) throw ServiceError("rollout reply has the wrong number of items");
  rep.rollout_ms = ms_since(t0);

  std::vector<RolloutGroup> groups;
  double reward_sum = 0.0, tps_sum = 0.0;
  int64_t n_traj = 0, passed = 0;
  for (size_t p = 0; p < prompts.size(); ++p) {
    RolloutGroup g;
    g.prompt = prompts[p].prompt_tokens();
    for (size_t k = 0; k < G; ++k) {
      const GenerateItem& it = items[p * G + k];
      if (!it.ok) continue;
      g.trajectories.push_back(it.trajectory);
      g.rewards.push_back(tasks::verify(it.trajectory.output, prompts[p]));
      tps_sum += it.trajectory.stats.tokens_per_step;
    }
    g.advantages = compute_advantages(g.rewards);
    const double group_reward = std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0);
    reward_sum += group_reward;
    passed += group_reward > 0.0 ? 1 : 0;
    n_traj += static_cast<int64_t>(g.trajectories.size());
    groups.push_back(std::move(g));
  }
  rep.mean_reward = n_traj > 0 ? reward_sum / static_cast<double>(n_traj) : 0.0;
  rep.tokens_per_step = n_traj > 0 ? tps_sum / static_cast<double>(n_traj) : 0.0;
  rep.pass_rate = prompts.empty() ? 0.0 : static_cast<double>(passed) / static_cast<double>(prompts.size());

  t0 = Clock::now();
  DipoLossResult r = dipo_loss(params, groups, &state.reference, config, true);
  rep.clip_frac = r.diag.clip_frac;
  rep.kl = r.diag.kl;
  rep.grad_norm = grad_norm(r.grads);
  // An all-zero gradient would still let AdamW momentum move the weights.
  if (rep.grad_norm > 0.0) {
    clip_grad_norm(r.grads, config.grad_clip);
    const float lr = step < config.warmup ? config.lr * static_cast<float>(step + 1) / static_cast<float>(config.warmup + 1)
                                          : config.lr;
    optimizer_step(params.tensors, r.grads, state.optim, lr);
  }
  rep.train_ms = ms_since(t0);

  t0 = Clock::now();
  rep.version = with_retry("weight update", [&] { return backend.update_weights(params); });
  params.version = rep.version;
  rep.update_ms = ms_since(t0);
  return rep;
}

std::vector<TrainStepReport> rl_train(RolloutBackend& backend, ModelParams& params, const DipoConfig& config,
                                      const std::vector<tasks::TaskSample>& train_set, const RlCallback& on_step) {
  config.validate();
  if (train_set.empty()) throw ConfigError("rl: training set is empty");
  RlState state = make_rl_state(params, config);
  std::mt19937_64 rng(config.seed ^ 0x5eedULL);
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), size_t{0});
  size_t cursor = order.size();
  std::vector<TrainStepReport> reports;
  for (int64_t step = 0; step < config.steps; ++step) {
    std::vector<tasks::TaskSample> prompts;
    for (int64_t i = 0; i < config.batch_prompts; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      prompts.push_back(train_set[order[cursor++]]);
    }
    reports.push_back(rl_train_step(backend, params, state, config, prompts, step));
    if (on_step) on_step(reports.back(), params);
  }
  return reports;
}

// ---- evaluation ------------------------------------------------------------

EvalResult evaluate(const ModelParams& params, const std::vector<tasks::TaskSample>& samples, const DecodePolicy& policy) {
  EvalResult r;
  r.policy = policy.mode == DecodeMode::Static ? "static" : "dynamic";
  r.threshold = policy.mode == DecodeMode::Static ? 0.0f : policy.threshold;
  r.n = static_cast<int64_t>(samples.size());
  if (samples.empty()) return r;
  double correct = 0.0, tps = 0.0, len = 0.0;
  for (const auto& s : samples) {
    const Trajectory t = generate(params, s.prompt_tokens(), policy);
    correct += tasks::verify(t.output, s);
    tps += t.stats.tokens_per_step;
    len += static_cast<double>(t.scored_output(params.config.eos_token_id).size());
  }
  const auto n = static_cast<double>(samples.size());
  r.accuracy = correct / n;
  r.tokens_per_step = tps / n;
  r.avg_length = len / n;
  return r;
}

std::vector<EvalResult> evaluate_sweep(const ModelParams& params, const std::vector<tasks::TaskSample>& samples,
                                       int64_t max_new_tokens, std::span<const float> thresholds) {
  std::vector<EvalResult> rows;
  DecodePolicy p;
  p.mode = DecodeMode::Static;
  p.temperature = 0.0f;
  p.max_new_tokens = max_new_tokens;
  rows.push_back(evaluate(params, samples, p));
  p.mode = DecodeMode::Dynamic;
  for (float tau : thresholds) {
    p.threshold = tau;
    rows.push_back(evaluate(params, samples, p));
  }
  return rows;
}

std::string eval_csv_header() { return "policy,tau,accuracy,tokens_per_step,avg_length,n"; }

std::string to_csv_row(const EvalResult& r) {
  std::ostringstream os;
  os << r.policy << ',' << r.threshold << ',' << r.accuracy << ',' << r.tokens_per_step << ',' << r.avg_length << ',' << r.n;
  return os.str();
}

}  // namespace bdlm
