// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <random>

#include "bdlm/dipo_trainer.hpp"
#include "bdlm/error.hpp"
#include "dipo_oracle.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bdlm;

using oracle::sequential_objective;
using oracle::toy_batch;

TEST_CASE("advantages are mean-subtracted rewards") {
  CHECK(compute_advantages(std::vector<double>{1, 1, 1, 1}) == std::vector<double>{0, 0, 0, 0});
  CHECK(compute_advantages(std::vector<double>{1, 0}) == std::vector<double>{0.5, -0.5});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(2 + trial % 9);
    for (double& x : r) x = u(rng);
    double s = 0.0;
    for (double a : compute_advantages(r)) s += a;
    CHECK(std::abs(s) < 1e-6);
  }
}

TEST_CASE("config validation names the field") {
  DipoConfig c;
  c.group_size = 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("rl.group_size"), ConfigError);
  c = DipoConfig{};
  c.clip_eps = 1.0f;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("rl.clip_eps"), ConfigError);
  c = DipoConfig{};
  nlohmann::json j = c;
  CHECK(j.get<DipoConfig>().group_size == c.group_size);
  j["objective"] = "bogus";
  CHECK_THROWS_AS(j.get<DipoConfig>(), ConfigError);
}

TEST_CASE("dipo gradient equals the token-normalized REINFORCE gradient at ratio one") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 21, 60.0f);
  const auto groups = toy_batch(p, 5);
  DipoConfig cfg;
  cfg.group_size = 2;
  const DipoLossResult r = dipo_loss(p, groups, nullptr, cfg, true);
  CHECK(r.diag.clip_frac == 0.0);
  CHECK(r.diag.tokens > 0);

  Tape tape(true);
  BoundParams bound(tape, p, true);
  Var total = tape.constant(Tensor::scalar(0.0f));
  for (const auto& g : groups) {
    for (size_t i = 0; i < g.trajectories.size(); ++i) {
      const Trajectory& t = g.trajectories[i];
      const int64_t limit = t.first_eos(p.config.eos_token_id);
      const auto w = static_cast<float>(g.advantages[i] / static_cast<double>(r.diag.tokens));
      total = add(total, sequential_objective(bound, t, [&](int32_t pos) { return pos <= limit ? w : 0.0f; }));
    }
  }
  tape.backward(scale(total, -1.0f));
  const GradMap oracle = bound.grads();
  CHECK(testutil::grad_rel_err(r.grads, oracle) < 1e-4);
}

TEST_CASE("zero advantages give zero loss gradient") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 22, 60.0f);
  auto groups = toy_batch(p, 9);
  for (auto& g : groups) {
    g.rewards.assign(g.rewards.size(), 1.0);
    g.advantages = compute_advantages(g.rewards);
  }
  DipoConfig cfg;
  cfg.group_size = 2;
  const DipoLossResult r = dipo_loss(p, groups, nullptr, cfg, true);
  CHECK(grad_norm(r.grads) == 0.0);
  CHECK(r.loss == 0.0);
}

TEST_CASE("KL against an identical reference is zero with zero gradient") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 23, 60.0f);
  auto groups = toy_batch(p, 13);
  for (auto& g : groups) g.advantages.assign(g.advantages.size(), 0.0);
  DipoConfig cfg;
  cfg.group_size = 2;
  cfg.objective = DipoObjective::SequenceWithKl;
  cfg.kl_beta = 0.5f;
  const DipoLossResult r = dipo_loss(p, groups, &p, cfg, true);
  CHECK(r.diag.kl == 0.0);
  CHECK(grad_norm(r.grads) == 0.0);
  CHECK_THROWS_AS(dipo_loss(p, groups, nullptr, cfg, true), ContractError);
}

TEST_CASE("KL estimator is positive against a different reference") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 24, 60.0f);
  const ModelParams ref = testutil::sharp_params(testutil::tiny_config(), 25, 60.0f);
  const auto groups = toy_batch(p, 17);
  DipoConfig cfg;
  cfg.group_size = 2;
  cfg.objective = DipoObjective::SequenceWithKl;
  cfg.kl_beta = 0.1f;
  const DipoLossResult r = dipo_loss(p, groups, &ref, cfg, true);
  CHECK(r.diag.kl > 0.0);
}

TEST_CASE("an empty group does not change the loss") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 26, 60.0f);
  auto groups = toy_batch(p, 19);
  DipoConfig cfg;
  cfg.group_size = 2;
  const DipoLossResult a = dipo_loss(p, groups, nullptr, cfg, true);
  groups.push_back(RolloutGroup{});
  const DipoLossResult b = dipo_loss(p, groups, nullptr, cfg, true);
  CHECK(a.loss == b.loss);
  CHECK(testutil::grad_rel_err(a.grads, b.grads) == 0.0);
}

TEST_CASE("tokens after the first EOS carry no loss") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 27, 60.0f);
  auto groups = toy_batch(p, 23);
  DipoConfig cfg;
  cfg.group_size = 2;
  // Force an EOS at output position 1 of the first trajectory.
  Trajectory& t = groups[0].trajectories[0];
  for (auto& s : t.steps) {
    for (size_t i = 0; i < s.positions.size(); ++i) {
      if (s.positions[i] == 1) s.tokens[i] = p.config.eos_token_id;
    }
  }
  t.output[1] = p.config.eos_token_id;
  REQUIRE(t.first_eos(p.config.eos_token_id) <= 1);
  int64_t expected = 0;
  for (const auto& g : groups) {
    for (const auto& tr : g.trajectories) {
      const int64_t eos = tr.first_eos(p.config.eos_token_id);
      for (int64_t i = 0; i < static_cast<int64_t>(tr.output.size()); ++i) expected += i <= eos ? 1 : 0;
    }
  }
  const DipoLossResult r = dipo_loss(p, groups, nullptr, cfg, true);
  CHECK(r.diag.tokens == expected);
  CHECK(expected < 32);
}

TEST_CASE("dipo loss matches central differences with frozen behavior log-probs") {
  const ModelConfig cfg_m = testutil::tiny_config();
  // Mildly peaked so that +-h stays well inside the clip range.
  const ModelParams p = testutil::sharp_params(cfg_m, 28, 3.0f);
  const auto groups = toy_batch(p, 29);
  for (DipoObjective obj : {DipoObjective::TokenLevel, DipoObjective::SequenceWithKl}) {
    DipoConfig cfg;
    cfg.group_size = 2;
    cfg.objective = obj;
    cfg.kl_beta = obj == DipoObjective::SequenceWithKl ? 0.3f : 0.0f;
    const ModelParams ref = testutil::sharp_params(cfg_m, 30, 3.0f);
    const DipoLossResult r = dipo_loss(p, groups, &ref, cfg, true, &p);
    auto f = [&](const ModelParams& q) { return dipo_loss(q, groups, &ref, cfg, false, &p).loss; };
    CHECK(testutil::directional_fd_rel_err(p, r.grads, f, 31, 1e-3) < 1e-3);
  }
}

TEST_CASE("clipping activates once the policy moves past epsilon") {
  const ModelParams p = testutil::sharp_params(testutil::tiny_config(), 32, 60.0f);
  const ModelParams moved = testutil::sharp_params(testutil::tiny_config(), 33, 60.0f);
  const auto groups = toy_batch(p, 37);
  DipoConfig cfg;
  cfg.group_size = 2;
  cfg.clip_eps = 0.05f;
  const DipoLossResult r = dipo_loss(moved, groups, nullptr, cfg, true, &p);
  CHECK(r.diag.clip_frac > 0.0);
  CHECK(r.diag.clip_frac <= 1.0);
}

TEST_CASE("evaluate reports exact static tokens per step and a sweep row per threshold") {
  const ModelParams p = testutil::sharp_params(testutil::task_config(), 40, 60.0f);
  const auto samples = tasks::gen_dataset(1, 6, 2);
  const std::vector<float> taus = {0.5f, 0.7f, 0.9f, 0.99f};
  const auto rows = evaluate_sweep(p, samples, 16, taus);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].policy == "static");
  CHECK(rows[0].tokens_per_step == 1.0);
  for (size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].policy == "dynamic");
    CHECK(rows[i].threshold == taus[i - 1]);
  }
  CHECK(to_csv_row(rows[0]).rfind("static,", 0) == 0);
}
