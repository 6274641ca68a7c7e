// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "bdlm/blockmask.hpp"
#include "bdlm/error.hpp"

namespace bdlm::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr const char* kVersion = "0.1.0";

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void log_line(const CommandContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

void write_manifest(const CommandContext& ctx, const std::string& command, const fs::path& dir,
                    const std::vector<fs::path>& artifacts, double wall_s, json extra = json::object()) {
  json m;
  m["command"] = command;
  m["config"] = ctx.config.doc;
  m["config_hash"] = ctx.config.hash();
  m["seed"] = ctx.config.data.seed;
  m["versions"] = {{"bdlm", kVersion}, {"checkpoint_format", "BDLM1"}};
  json arts = json::array();
  for (const auto& a : artifacts) arts.push_back(fs::relative(a, ctx.out).generic_string());
  m["artifacts"] = arts;
  m["wall_s"] = wall_s;
  for (auto& [k, v] : extra.items()) m[k] = v;
  open_out(dir / "manifest.json") << m.dump(2) << "\n";
}

struct Splits {
  std::vector<tasks::TaskSample> train, eval;
};

Splits make_splits(const DataConfig& d) {
  auto all = tasks::gen_dataset(d.seed, d.train_size + d.eval_size, d.digits);
  Splits s;
  s.eval.assign(all.begin(), all.begin() + d.eval_size);
  s.train.assign(all.begin() + d.eval_size, all.end());
  return s;
}

// Reads the split files when present, otherwise regenerates them from the config.
Splits load_splits(const CommandContext& ctx) {
  const fs::path tr = train_data_path(ctx.out), ev = eval_data_path(ctx.out);
  if (fs::exists(tr) && fs::exists(ev)) return {tasks::read_jsonl(tr), tasks::read_jsonl(ev)};
  run_gen_data(ctx);
  return {tasks::read_jsonl(tr), tasks::read_jsonl(ev)};
}

DecodePolicy greedy_policy(const CommandContext& ctx) {
  DecodePolicy p = ctx.config.decode;
  p.mode = DecodeMode::Static;
  p.temperature = 0.0f;
  return p;
}

ModelParams load_input(const CommandContext& ctx, const fs::path& fallback) {
  const fs::path path = ctx.checkpoint.value_or(fallback);
  if (!fs::exists(path)) throw Error("checkpoint not found: " + path.string() + " (run the previous stage first)");
  return load_checkpoint(path);
}

std::pair<std::string, uint16_t> split_host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--connect expects host:port, got '" + s + "'");
  const int port = std::stoi(s.substr(colon + 1));
  if (port <= 0 || port > 65535) throw ConfigError("--connect: bad port in '" + s + "'");
  return {s.substr(0, colon), static_cast<uint16_t>(port)};
}

// Baseline rollout backend: every generate() reloads the policy from disk into
// a fresh service and every update writes a checkpoint.
class ReloadBackend : public RolloutBackend {
 public:
  ReloadBackend(fs::path path, LoopTiming& timing) : path_(std::move(path)), timing_(timing) {}

  std::vector<GenerateItem> generate(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy) override {
    auto t0 = Clock::now();
    auto service = RolloutService::from_checkpoint(path_);
    timing_.load_ms += ms_since(t0);
    timing_.loads += static_cast<int>(service->loads());
    return service->generate_batch(prompts, policy);
  }

  uint64_t update_weights(const ModelParams& params) override {
    save_checkpoint(params, path_);
    ++timing_.saves;
    return params.version + 1;
  }

 private:
  fs::path path_;
  LoopTiming& timing_;
};

}  // namespace

fs::path train_data_path(const fs::path& out) { return out / "data" / "train.jsonl"; }
fs::path eval_data_path(const fs::path& out) { return out / "data" / "eval.jsonl"; }
fs::path sft_checkpoint_path(const fs::path& out) { return out / "sft" / "checkpoint.bin"; }
fs::path rl_checkpoint_path(const fs::path& out) { return out / "rl" / "checkpoint.bin"; }

void run_gen_data(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  const Splits s = make_splits(ctx.config.data);
  const fs::path tr = train_data_path(ctx.out), ev = eval_data_path(ctx.out);
  fs::create_directories(tr.parent_path());
  tasks::write_jsonl(tr, s.train);
  tasks::write_jsonl(ev, s.eval);
  log_line(ctx, "gen-data: " + std::to_string(s.train.size()) + " train, " + std::to_string(s.eval.size()) + " eval");
  write_manifest(ctx, "gen-data", tr.parent_path(), {tr, ev}, ms_since(t0) / 1000.0);
}

SftOutcome run_sft(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  const Splits splits = load_splits(ctx);
  std::vector<SftExample> data;
  data.reserve(splits.train.size());
  for (const auto& s : splits.train) data.push_back({s.prompt_tokens(), s.solution_tokens()});

  const fs::path dir = ctx.out / "sft";
  std::ofstream metrics = open_out(dir / "metrics.csv");
  metrics << "step,loss,lr,masked_frac,wall_ms\n";
  ModelParams params = init_params(ctx.config.model);
  const int64_t every = std::max<int64_t>(1, ctx.config.sft.steps / 20);
  const auto history = sft_train(params, ctx.config.sft, data, {}, [&](const SftStepMetrics& m, const ModelParams&) {
    metrics << m.step << ',' << fmt(m.loss, 6) << ',' << m.lr << ',' << fmt(m.masked_frac, 6) << ',' << fmt(m.wall_ms, 2)
            << '\n';
    if (m.step % every == 0 || m.step + 1 == ctx.config.sft.steps) {
      log_line(ctx, "sft step " + std::to_string(m.step) + " loss " + fmt(m.loss));
    }
  });
  metrics.close();
  save_checkpoint(params, sft_checkpoint_path(ctx.out));

  const EvalResult ev = evaluate(params, splits.eval, greedy_policy(ctx));
  std::ofstream eval = open_out(dir / "eval.csv");
  eval << eval_csv_header() << "\n" << to_csv_row(ev) << "\n";
  eval.close();
  log_line(ctx, "sft eval accuracy " + fmt(ev.accuracy));

  SftOutcome o;
  o.final_loss = history.empty() ? 0.0 : history.back().loss;
  o.eval_accuracy = ev.accuracy;
  o.wall_s = ms_since(t0) / 1000.0;
  write_manifest(ctx, "sft", dir, {sft_checkpoint_path(ctx.out), dir / "metrics.csv", dir / "eval.csv"}, o.wall_s,
                 {{"eval_accuracy", o.eval_accuracy}, {"final_loss", o.final_loss}});
  return o;
}

RlOutcome run_rl(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  const Splits splits = load_splits(ctx);
  ModelParams params = load_input(ctx, sft_checkpoint_path(ctx.out));
  if (!(params.config == ctx.config.model)) {
    // The checkpoint's architecture wins; only the seed may legitimately differ.
    log_line(ctx, "rl: using the checkpoint's model config");
  }
  const DecodePolicy greedy = greedy_policy(ctx);
  RlOutcome o;
  o.initial_accuracy = evaluate(params, splits.eval, greedy).accuracy;
  log_line(ctx, "rl: initial accuracy " + fmt(o.initial_accuracy));

  const fs::path dir = ctx.out / "rl";
  std::ofstream metrics = open_out(dir / "metrics.csv");
  metrics << train_report_csv_header() << "\n";
  auto on_step = [&](const TrainStepReport& r, const ModelParams&) {
    metrics << to_csv_row(r) << "\n";
    log_line(ctx, "rl step " + std::to_string(r.step) + " reward " + fmt(r.mean_reward) + " pass " + fmt(r.pass_rate));
  };

  int64_t loads = 0;
  if (ctx.connect) {
    const auto [host, port] = split_host_port(*ctx.connect);
    ServiceClient client(host, port);
    client.update_weights(params);
    RemoteBackend backend(client);
    rl_train(backend, params, ctx.config.rl, splits.train, on_step);
    loads = client.loads();
  } else {
    RolloutService service(params, ctx.config.service);
    InProcessBackend backend(service);
    rl_train(backend, params, ctx.config.rl, splits.train, on_step);
    loads = service.loads();
  }
  metrics.close();
  save_checkpoint(params, rl_checkpoint_path(ctx.out));

  o.final_accuracy = evaluate(params, splits.eval, greedy).accuracy;
  log_line(ctx, "rl: final accuracy " + fmt(o.final_accuracy));
  o.wall_s = ms_since(t0) / 1000.0;
  const json summary = {{"sft_accuracy", o.initial_accuracy},
                        {"rl_accuracy", o.final_accuracy},
                        {"gain", o.final_accuracy - o.initial_accuracy},
                        {"service_loads", loads}};
  open_out(dir / "summary.json") << summary.dump(2) << "\n";
  write_manifest(ctx, "rl", dir, {rl_checkpoint_path(ctx.out), dir / "metrics.csv", dir / "summary.json"}, o.wall_s,
                 summary);
  return o;
}

std::vector<EvalResult> run_eval(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  const Splits splits = load_splits(ctx);
  const fs::path fallback = fs::exists(rl_checkpoint_path(ctx.out)) ? rl_checkpoint_path(ctx.out)
                                                                      : sft_checkpoint_path(ctx.out);
  const ModelParams params = load_input(ctx, fallback);
  const auto results =
      evaluate_sweep(params, splits.eval, ctx.config.decode.max_new_tokens, ctx.config.eval.thresholds);
  const fs::path dir = ctx.out / "eval";
  std::ofstream out = open_out(dir / "eval.csv");
  out << eval_csv_header() << "\n";
  for (const auto& r : results) {
    out << to_csv_row(r) << "\n";
    log_line(ctx, "eval " + r.policy + " tau=" + fmt(r.threshold, 2) + " acc " + fmt(r.accuracy) + " tok/step " +
                      fmt(r.tokens_per_step, 3));
  }
  out.close();
  write_manifest(ctx, "eval", dir, {dir / "eval.csv"}, ms_since(t0) / 1000.0);
  return results;
}

void run_serve(const CommandContext& ctx) {
  const fs::path fallback = fs::exists(rl_checkpoint_path(ctx.out)) ? rl_checkpoint_path(ctx.out)
                                                                      : sft_checkpoint_path(ctx.out);
  const fs::path path = ctx.checkpoint.value_or(fallback);
  auto service = RolloutService::from_checkpoint(path, ctx.config.service);
  ServiceServer server(*service, ctx.config.service.host, ctx.config.service.port);
  server.start();
  log_line(ctx, "serving " + path.string() + " on " + ctx.config.service.host + ":" + std::to_string(server.port()));
  server.wait();
}

// ---- benchmarks ------------------------------------------------------------

std::vector<BenchMaskRow> bench_mask(const ModelConfig& base, int64_t batch, uint64_t seed) {
  std::vector<BenchMaskRow> rows;
  std::mt19937_64 rng(seed);
  for (int64_t B : {1, 2, 4}) {
    ModelConfig cfg = base;
    cfg.block_size = B;
    cfg.seed = seed + static_cast<uint64_t>(B);
    const ModelParams params = init_params(cfg);
    for (int64_t K : {1, 2, 3}) {
      NoisyBatch nb;
      for (int64_t i = 0; i < batch; ++i) {
        std::vector<int32_t> prompt(static_cast<size_t>(1 + rng() % (2 * B))), response(static_cast<size_t>(K * B));
        for (auto& x : prompt) x = static_cast<int32_t>(rng() % 14);
        for (auto& x : response) x = static_cast<int32_t>(rng() % 16);
        nb.items.push_back(make_noisy_sequence(cfg, prompt, response, {}, rng));
      }
      std::vector<Tensor> reference;
      auto t0 = Clock::now();
      for (const auto& s : nb.items) reference.push_back(sequential_loss_logits(params, s));
      const double seq_ms = ms_since(t0);
      rows.push_back({"sequential", B, K, sft_loss_sequential(params, nb, {}).forward_calls, seq_ms, 0.0f});

      for (RepeatMode mode : {RepeatMode::OutputOnly, RepeatMode::Blockwise}) {
        float diff = 0.0f;
        for (size_t i = 0; i < nb.items.size(); ++i) {
          diff = std::max(diff, max_abs_diff(expanded_loss_logits(params, nb.items[i], mode), reference[i]));
        }
        t0 = Clock::now();
        const LossResult r = sft_loss(params, nb, {}, false, mode);
        const double ms = ms_since(t0);
        rows.push_back({mode == RepeatMode::Blockwise ? "blockwise" : "output_only", B, K, r.forward_calls, ms, diff});
      }
    }
  }
  return rows;
}

std::vector<BenchMaskRow> run_bench_mask(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  const fs::path dir = ctx.out / "bench_mask";
  const auto rows = bench_mask(ctx.config.model, 8, ctx.config.model.seed);
  std::ofstream out = open_out(dir / "bench_mask.csv");
  out << "mode,B,K,forward_calls,wall_ms\n";
  float worst = 0.0f;
  for (const auto& r : rows) {
    out << r.mode << ',' << r.block_size << ',' << r.blocks << ',' << r.forward_calls << ',' << fmt(r.wall_ms, 3) << '\n';
    worst = std::max(worst, r.max_abs_diff);
  }
  out.close();

  // One small picture per mode: two prompt blocks and three output blocks of size 4.
  std::vector<fs::path> artifacts = {dir / "bench_mask.csv"};
  const BlockLayout layout{4, 2, 3};
  std::vector<int32_t> clean(static_cast<size_t>(layout.total_len()), 1), noisy = clean;
  for (int64_t i = layout.prompt_len(); i < layout.total_len(); i += 2) noisy[static_cast<size_t>(i)] = ctx.config.model.mask_token_id;
  for (RepeatMode mode : {RepeatMode::OutputOnly, RepeatMode::Blockwise}) {
    const auto e = sft_repeat_expansion(layout, clean, noisy, ctx.config.model.mask_token_id, mode);
    const fs::path pbm = dir / (mode == RepeatMode::Blockwise ? "mask_blockwise.pbm" : "mask_output_only.pbm");
    open_out(pbm) << e.mask.to_pbm();
    artifacts.push_back(pbm);
  }
  log_line(ctx, "bench-mask: max |expanded - sequential| = " + std::to_string(worst));
  write_manifest(ctx, "bench-mask", dir, artifacts, ms_since(t0) / 1000.0, {{"max_abs_diff", worst}});
  if (!(worst <= 1e-5f)) throw NumericError("bench-mask: expanded logits differ from sequential by " + std::to_string(worst));
  return rows;
}

DipoConfig bench_loop_config(const DipoConfig& rl) {
  DipoConfig c = rl;
  c.group_size = 4;
  c.batch_prompts = 1;
  return c;
}

BenchLoopResult bench_loop(const ModelParams& start, const DipoConfig& rl, const std::vector<tasks::TaskSample>& prompts,
                           int runs, const fs::path& scratch, int steps_per_run) {
  fs::create_directories(scratch);
  const fs::path ckpt = scratch / "policy.bin";

  // Baseline: the trainer holds the policy only on disk between stages.
  auto baseline = [&](int run) {
    LoopTiming t;
    t.loop = "baseline";
    t.run = run;
    save_checkpoint(start, ckpt);
    auto t0 = Clock::now();
    ModelParams params = load_checkpoint(ckpt);
    t.load_ms += ms_since(t0);
    ++t.loads;
    RlState state = make_rl_state(params, rl);
    ReloadBackend backend(ckpt, t);
    const double trainer_load = t.load_ms;
    const TrainStepReport r = rl_train_step(backend, params, state, rl, prompts, 0);
    // The trainer's rollout time includes the fresh service's load.
    t.rollout_ms = r.rollout_ms - (t.load_ms - trainer_load);
    t.train_ms = r.train_ms;
    t.update_ms = r.update_ms;
    return t;
  };
  // DiRL: persistent service, in-place update.
  RolloutService service(start);
  auto dirl = [&](int run) {
    LoopTiming t;
    t.loop = "dirl";
    t.run = run;
    ModelParams params = start;
    service.update_weights(params);
    const int64_t loads_before = service.loads();
    RlState state = make_rl_state(params, rl);
    InProcessBackend backend(service);
    const TrainStepReport r = rl_train_step(backend, params, state, rl, prompts, 0);
    t.rollout_ms = r.rollout_ms;
    t.train_ms = r.train_ms;
    t.update_ms = r.update_ms;
    t.loads = static_cast<int>(service.loads() - loads_before);
    return t;
  };

  // Median-total step of each loop over interleaved pairs.
  auto median = [](std::vector<LoopTiming> v) {
    std::sort(v.begin(), v.end(), [](const LoopTiming& a, const LoopTiming& b) { return a.total_ms() < b.total_ms(); });
    return v[v.size() / 2];
  };
  BenchLoopResult result;
  baseline(-1);  // warm-up, not recorded
  dirl(-1);
  for (int run = 0; run < runs; ++run) {
    std::vector<LoopTiming> b, d;
    for (int i = 0; i < steps_per_run; ++i) {
      b.push_back(baseline(run));
      d.push_back(dirl(run));
    }
    result.steps.push_back(median(b));
    result.steps.push_back(median(d));
  }

  constexpr int kReps = 20;
  ModelParams params = start;
  auto t0 = Clock::now();
  for (int i = 0; i < kReps; ++i) service.update_weights(params);
  result.inplace_update_ms = ms_since(t0) / kReps;
  t0 = Clock::now();
  for (int i = 0; i < kReps; ++i) {
    save_checkpoint(params, ckpt);
    params = load_checkpoint(ckpt);
  }
  result.save_load_ms = ms_since(t0) / kReps;
  fs::remove(ckpt);
  return result;
}

BenchLoopResult run_bench_loop(const CommandContext& ctx, int runs) {
  const auto t0 = Clock::now();
  const fs::path dir = ctx.out / "bench_loop";
  const fs::path sft = ctx.checkpoint.value_or(sft_checkpoint_path(ctx.out));
  const ModelParams start = fs::exists(sft) ? load_checkpoint(sft) : init_params(ctx.config.model);
  log_line(ctx, std::string("bench-loop: policy from ") + (fs::exists(sft) ? sft.string() : "fresh initialization"));
  const DipoConfig rl = bench_loop_config(ctx.config.rl);
  const auto prompts = tasks::gen_dataset(ctx.config.data.seed + 1, rl.batch_prompts, ctx.config.data.digits);
  const BenchLoopResult res = bench_loop(start, rl, prompts, runs, dir / "scratch");
  fs::remove_all(dir / "scratch");

  std::ofstream out = open_out(dir / "bench_loop.csv");
  out << "loop,run,load_ms,rollout_ms,train_ms,update_ms,total_ms,loads,saves\n";
  for (const auto& s : res.steps) {
    out << s.loop << ',' << s.run << ',' << fmt(s.load_ms, 3) << ',' << fmt(s.rollout_ms, 3) << ',' << fmt(s.train_ms, 3)
        << ',' << fmt(s.update_ms, 3) << ',' << fmt(s.total_ms(), 3) << ',' << s.loads << ',' << s.saves << '\n';
    log_line(ctx, s.loop + " run " + std::to_string(s.run) + ": load " + fmt(s.load_ms, 1) + " rollout " +
                      fmt(s.rollout_ms, 1) + " train " + fmt(s.train_ms, 1) + " update " + fmt(s.update_ms, 1) +
                      " total " + fmt(s.total_ms(), 1) + " ms");
  }
  out.close();
  std::ofstream micro = open_out(dir / "update_micro.csv");
  micro << "operation,mean_ms\ninplace_update," << fmt(res.inplace_update_ms, 5) << "\nsave_load,"
        << fmt(res.save_load_ms, 5) << "\n";
  micro.close();
  log_line(ctx, "in-place update " + fmt(res.inplace_update_ms, 4) + " ms vs save+load " + fmt(res.save_load_ms, 3) + " ms");
  write_manifest(ctx, "bench-loop", dir, {dir / "bench_loop.csv", dir / "update_micro.csv"}, ms_since(t0) / 1000.0,
                 {{"inplace_update_ms", res.inplace_update_ms}, {"save_load_ms", res.save_load_ms}});
  return res;
}

}  // namespace bdlm::cli
