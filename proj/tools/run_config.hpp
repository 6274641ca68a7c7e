// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bdlm/decoder.hpp"
#include "bdlm/diffusion_sft.hpp"
#include "bdlm/dipo_trainer.hpp"
#include "bdlm/model.hpp"
#include "bdlm/rollout_service.hpp"
#include "json.hpp"

namespace bdlm::cli {

struct DataConfig {
  int digits = 3;
  int64_t train_size = 20000;
  int64_t eval_size = 500;
  uint64_t seed = 0;
};

struct EvalConfig {
  std::vector<float> thresholds = {0.5f, 0.7f, 0.9f, 0.99f};
};

/// The whole run configuration. `doc` is the resolved JSON document that
/// the typed sections were parsed from; it is what gets hashed.
struct RunConfig {
  nlohmann::json doc;
  DataConfig data;
  ModelConfig model;
  SftConfig sft;
  DipoConfig rl;
  DecodePolicy decode;
  ServiceConfig service;
  EvalConfig eval;

  std::string hash() const;
};

/// Full default document: sections data, model, sft, rl, decode, service, eval.
nlohmann::json default_config();

/// defaults <- config file <- `sets` ("dotted.path=value") <- seed.
/// A config file must be a complete document; unknown, missing or mistyped
/// fields throw ConfigError naming the dotted path.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                         std::optional<uint64_t> seed);

/// Parses typed sections from a complete document and validates them.
RunConfig parse_config(const nlohmann::json& doc);

}  // namespace bdlm::cli
