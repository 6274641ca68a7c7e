// SPDX-License-Identifier: Apache-2.0

#include "bdlm/trajectory.hpp"

#include <algorithm>

#include "bdlm/error.hpp"

namespace bdlm {

int64_t Trajectory::first_eos(int32_t eos_token_id) const {
  auto it = std::find(output.begin(), output.end(), eos_token_id);
  return it - output.begin();
}

std::vector<int32_t> Trajectory::scored_output(int32_t eos_token_id) const {
  const int64_t eos = first_eos(eos_token_id);
  const int64_t end = std::min<int64_t>(eos + 1, static_cast<int64_t>(output.size()));
  return {output.begin(), output.begin() + end};
}

void to_json(nlohmann::json& j, const StepRecord& s) {
  j = nlohmann::json{{"block", s.block},
                     {"step", s.step},
                     {"positions", s.positions},
                     {"tokens", s.tokens},
                     {"logprobs", s.logprobs}};
}

void from_json(const nlohmann::json& j, StepRecord& s) {
  j.at("block").get_to(s.block);
  j.at("step").get_to(s.step);
  j.at("positions").get_to(s.positions);
  j.at("tokens").get_to(s.tokens);
  j.at("logprobs").get_to(s.logprobs);
  if (s.positions.size() != s.tokens.size() || s.positions.size() != s.logprobs.size()) {
    throw TraceError("step record fields have different lengths");
  }
}

void to_json(nlohmann::json& j, const Trajectory& t) {
  j = nlohmann::json{{"prompt", t.prompt},
                     {"output", t.output},
                     {"steps", t.steps},
                     {"finish", t.finish == FinishReason::Eos ? "eos" : "length"},
                     {"stats", {{"total_steps", t.stats.total_steps}, {"tokens_per_step", t.stats.tokens_per_step}}},
                     {"version", t.version},
                     {"temperature", t.temperature}};
}

void from_json(const nlohmann::json& j, Trajectory& t) {
  j.at("prompt").get_to(t.prompt);
  j.at("output").get_to(t.output);
  j.at("steps").get_to(t.steps);
  const std::string finish = j.at("finish").get<std::string>();
  if (finish == "eos") {
    t.finish = FinishReason::Eos;
  } else if (finish == "length") {
    t.finish = FinishReason::Length;
  } else {
    throw TraceError("unknown finish reason '" + finish + "'");
  }
  const auto& stats = j.at("stats");
  stats.at("total_steps").get_to(t.stats.total_steps);
  stats.at("tokens_per_step").get_to(t.stats.tokens_per_step);
  t.version = j.value("version", uint64_t{0});
  t.temperature = j.value("temperature", 0.0f);
}

}  // namespace bdlm
