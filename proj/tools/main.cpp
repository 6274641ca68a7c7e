// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "bdlm/error.hpp"
#include "commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
  std::string out = "runs/default";
  std::string checkpoint;
  std::string connect;
  int runs = 3;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config document");
  cmd->add_option("--set", f.sets, "override a dotted config path, e.g. sft.lr=0.001")->take_all();
  cmd->add_option("--seed", f.seed, "seed for data, model, sft and rl");
  cmd->add_option("--out", f.out, "output directory (BDLM_OUT overrides)");
}

bdlm::cli::CommandContext make_context(const Flags& f) {
  bdlm::cli::CommandContext ctx;
  ctx.config = bdlm::cli::resolve_config(
      f.config.empty() ? std::nullopt : std::optional<std::filesystem::path>(f.config), f.sets, f.seed);
  ctx.out = f.out;
  if (const char* env = std::getenv("BDLM_OUT"); env && *env) ctx.out = env;
  if (!f.checkpoint.empty()) ctx.checkpoint = f.checkpoint;
  if (!f.connect.empty()) ctx.connect = f.connect;
  ctx.log = &std::cerr;
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block diffusion language model toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-data", "write train/eval splits of the addition task");
  auto* sft = app.add_subcommand("sft", "blockwise diffusion supervised fine-tuning");
  auto* rl = app.add_subcommand("rl", "DiPO reinforcement learning from the SFT checkpoint");
  auto* eval = app.add_subcommand("eval", "static and dynamic decoding sweep");
  auto* bmask = app.add_subcommand("bench-mask", "expanded vs sequential SFT forward timing");
  auto* bloop = app.add_subcommand("bench-loop", "persistent-service loop vs save/reload baseline");
  auto* serve = app.add_subcommand("serve", "run the rollout service over TCP");
  auto* print = app.add_subcommand("print-config", "print the resolved config document");
  for (auto* c : {gen, sft, rl, eval, bmask, bloop, serve, print}) add_common(c, f);
  for (auto* c : {rl, eval, bloop, serve}) c->add_option("--checkpoint", f.checkpoint, "input checkpoint");
  rl->add_option("--connect", f.connect, "host:port of a running rollout service");
  bloop->add_option("--runs", f.runs, "interleaved runs per loop")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    const bdlm::cli::CommandContext ctx = make_context(f);
    if (*print) {
      std::cout << ctx.config.doc.dump(2) << "\n";
    } else if (*gen) {
      bdlm::cli::run_gen_data(ctx);
    } else if (*sft) {
      bdlm::cli::run_sft(ctx);
    } else if (*rl) {
      bdlm::cli::run_rl(ctx);
    } else if (*eval) {
      bdlm::cli::run_eval(ctx);
    } else if (*bmask) {
      bdlm::cli::run_bench_mask(ctx);
    } else if (*bloop) {
      bdlm::cli::run_bench_loop(ctx, f.runs);
    } else if (*serve) {
      bdlm::cli::run_serve(ctx);
    }
  } catch (const bdlm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
