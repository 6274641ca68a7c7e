// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "bdlm/error.hpp"
#include "commands.hpp"
#include "doctest.h"

using namespace bdlm;
using namespace bdlm::cli;
namespace fs = std::filesystem;

namespace {

// Small enough that the whole gen-data -> sft -> rl chain runs in seconds.
const std::vector<std::string> kTiny = {
    "data.digits=1",        "data.train_size=64",    "data.eval_size=8",   "model.d_model=16",
    "model.n_layers=1",     "model.n_heads=2",       "model.max_seq_len=64", "model.block_size=4",
    "sft.steps=6",          "sft.batch_size=4",      "sft.warmup=1",       "rl.steps=2",
    "rl.batch_prompts=2",   "rl.group_size=2",       "rl.train_chunk=2",   "rl.rollout.max_new_tokens=12",
    "decode.max_new_tokens=12", "eval.thresholds=[0.5,0.9]"};

CommandContext tiny_context(const fs::path& out, uint64_t seed = 3) {
  CommandContext ctx;
  ctx.config = resolve_config(std::nullopt, kTiny, seed);
  ctx.out = out;
  return ctx;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bdlm_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// CSV with the named columns dropped.
std::string without_columns(const fs::path& p, const std::vector<std::string>& drop) {
  std::ifstream in(p);
  std::string line, out;
  std::vector<bool> keep;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (keep.empty()) {
      for (const auto& c : cells) keep.push_back(std::find(drop.begin(), drop.end(), c) == drop.end());
    }
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i < keep.size() && keep[i]) out += cells[i] + ',';
    }
    out += '\n';
  }
  return out;
}

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("default config resolves and round-trips") {
  const RunConfig a = resolve_config(std::nullopt, {}, std::nullopt);
  const RunConfig b = parse_config(a.doc);
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  CHECK(a.model.block_size == 8);
  CHECK(a.rl.group_size == 8);
  CHECK(a.rl.batch_prompts == 16);
}

TEST_CASE("config errors name the offending field") {
  CHECK(config_error([] { resolve_config(std::nullopt, {"sft.bogus=1"}, std::nullopt); }) == "sft.bogus: unknown field");
  CHECK(config_error([] { resolve_config(std::nullopt, {"sft.steps=\"many\""}, std::nullopt); }).rfind("sft.steps:", 0) ==
        0);
  CHECK(config_error([] { resolve_config(std::nullopt, {"rl.group_size=0"}, std::nullopt); }).find("rl.group_size") !=
        std::string::npos);
  CHECK(config_error([] { resolve_config(std::nullopt, {"noequals"}, std::nullopt); }).find("key=value") !=
        std::string::npos);

  nlohmann::json doc = default_config();
  doc.erase("data");
  CHECK(config_error([&] { parse_config(doc); }) == "data: missing field");
  doc = default_config();
  doc["rl"].erase("lr");
  CHECK(config_error([&] { parse_config(doc); }) == "rl.lr: missing field");

  const fs::path dir = scratch("cfg");
  fs::create_directories(dir);
  std::ofstream(dir / "partial.json") << R"({"data": {"digits": 3}})";
  CHECK(config_error([&] { resolve_config(dir / "partial.json", {}, std::nullopt); }).find("missing field") !=
        std::string::npos);
  std::ofstream(dir / "broken.json") << "{";
  CHECK(config_error([&] { resolve_config(dir / "broken.json", {}, std::nullopt); }).find("invalid JSON") !=
        std::string::npos);
  CHECK_THROWS_AS(resolve_config(dir / "absent.json", {}, std::nullopt), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("--set and --seed apply in order and change the hash") {
  const RunConfig base = resolve_config(std::nullopt, {}, std::nullopt);
  const RunConfig set = resolve_config(std::nullopt, {"sft.lr=0.002", "rl.rollout.mode=\"static\""}, std::nullopt);
  CHECK(set.sft.lr == doctest::Approx(0.002));
  CHECK(set.rl.rollout.mode == DecodeMode::Static);
  CHECK(set.hash() != base.hash());

  const RunConfig seeded = resolve_config(std::nullopt, {}, 42);
  CHECK(seeded.data.seed == 42);
  CHECK(seeded.model.seed == 42);
  CHECK(seeded.sft.seed == 42);
  CHECK(seeded.rl.seed == 42);
  CHECK(resolve_config(std::nullopt, {}, 42).hash() == seeded.hash());
}

TEST_CASE("config file is read as a complete document") {
  const fs::path dir = scratch("file");
  fs::create_directories(dir);
  nlohmann::json doc = default_config();
  doc["sft"]["steps"] = 7;
  std::ofstream(dir / "c.json") << doc.dump();
  const RunConfig c = resolve_config(dir / "c.json", {"sft.batch_size=3"}, std::nullopt);
  CHECK(c.sft.steps == 7);
  CHECK(c.sft.batch_size == 3);
  fs::remove_all(dir);
}

TEST_CASE("sft then rl consumes the checkpoint and writes manifests") {
  const fs::path out = scratch("pipeline");
  const CommandContext ctx = tiny_context(out);
  run_gen_data(ctx);
  CHECK(fs::exists(train_data_path(out)));
  CHECK(fs::exists(eval_data_path(out)));

  const SftOutcome sft = run_sft(ctx);
  CHECK(std::isfinite(sft.final_loss));
  REQUIRE(fs::exists(sft_checkpoint_path(out)));

  const RlOutcome rl = run_rl(ctx);
  CHECK(rl.initial_accuracy == doctest::Approx(sft.eval_accuracy));
  CHECK(fs::exists(rl_checkpoint_path(out)));

  for (const char* stage : {"data", "sft", "rl"}) {
    const auto m = nlohmann::json::parse(slurp(out / stage / "manifest.json"));
    CHECK(m.at("config_hash") == ctx.config.hash());
    CHECK(m.at("seed") == 3);
    CHECK(m.at("versions").contains("bdlm"));
    CHECK(m.at("config") == ctx.config.doc);
  }
  const auto summary = nlohmann::json::parse(slurp(out / "rl" / "summary.json"));
  CHECK(summary.at("service_loads") == 1);

  const auto results = run_eval(ctx);
  CHECK(results.size() == 1 + ctx.config.eval.thresholds.size());
  CHECK(fs::exists(out / "eval" / "eval.csv"));
  fs::remove_all(out);
}

TEST_CASE("rl without an sft checkpoint fails with a named error") {
  const fs::path out = scratch("nosft");
  CHECK_THROWS_AS(run_rl(tiny_context(out)), Error);
  fs::remove_all(out);
}

TEST_CASE("same config and seed reproduce every non-timing column") {
  const fs::path a = scratch("repro_a"), b = scratch("repro_b");
  for (const auto& out : {a, b}) {
    const CommandContext ctx = tiny_context(out, 11);
    run_gen_data(ctx);
    run_sft(ctx);
    run_rl(ctx);
  }
  CHECK(slurp(train_data_path(a)) == slurp(train_data_path(b)));
  CHECK(without_columns(a / "sft" / "metrics.csv", {"wall_ms"}) ==
        without_columns(b / "sft" / "metrics.csv", {"wall_ms"}));
  const std::vector<std::string> timing = {"rollout_ms", "train_ms", "update_ms"};
  CHECK(without_columns(a / "rl" / "metrics.csv", timing) == without_columns(b / "rl" / "metrics.csv", timing));
  CHECK(slurp(sft_checkpoint_path(a)) == slurp(sft_checkpoint_path(b)));
  CHECK(slurp(rl_checkpoint_path(a)) == slurp(rl_checkpoint_path(b)));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("bench_mask rows cover every layout with one expanded forward") {
  ModelConfig m;
  m.vocab_size = 18;
  m.d_model = 16;
  m.n_layers = 1;
  m.n_heads = 2;
  m.max_seq_len = 96;
  const auto rows = bench_mask(m, 2, 5);
  CHECK(rows.size() == 9 * 3);
  for (const auto& r : rows) {
    if (r.mode == "sequential") {
      CHECK(r.forward_calls >= r.blocks);
    } else {
      CHECK(r.forward_calls == 1);
      CHECK(r.max_abs_diff <= 1e-5f);
    }
  }
}

TEST_CASE("bench_loop counts loads and saves per loop") {
  ModelConfig m;
  m.vocab_size = 18;
  m.d_model = 16;
  m.n_layers = 1;
  m.n_heads = 2;
  m.max_seq_len = 64;
  m.block_size = 4;
  DipoConfig rl = bench_loop_config(DipoConfig{});
  rl.rollout.max_new_tokens = 8;
  CHECK(rl.group_size * rl.batch_prompts == 4);
  const fs::path dir = scratch("loop");
  const auto res = bench_loop(init_params(m), rl, tasks::gen_dataset(1, 1, 1), 2, dir, 3);
  REQUIRE(res.steps.size() == 4);
  for (const auto& s : res.steps) {
    if (s.loop == "baseline") {
      CHECK(s.loads == 2);
      CHECK(s.saves == 1);
    } else {
      CHECK(s.loads == 0);
      CHECK(s.saves == 0);
    }
  }
  CHECK(res.inplace_update_ms < res.save_load_ms);
  fs::remove_all(dir);
}
