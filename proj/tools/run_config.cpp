// SPDX-License-Identifier: Apache-2.0

#include "run_config.hpp"

#include <sodium.h>

#include <fstream>

#include "bdlm/error.hpp"

namespace bdlm::cli {

using nlohmann::json;

namespace {

json data_json(const DataConfig& d) {
  return json{{"digits", d.digits}, {"train_size", d.train_size}, {"eval_size", d.eval_size}, {"seed", d.seed}};
}

bool is_integer(const json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

// Checks `value` against the template node `tmpl` at `path`.
void check_node(const json& tmpl, const json& value, const std::string& path) {
  if (tmpl.is_object()) {
    if (!value.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, v] : value.items()) {
      if (!tmpl.contains(key)) throw ConfigError((path.empty() ? "" : path + ".") + key + ": unknown field");
    }
    for (const auto& [key, t] : tmpl.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      if (!value.contains(key)) throw ConfigError(sub + ": missing field");
      check_node(t, value.at(key), sub);
    }
    return;
  }
  if (tmpl.is_number_unsigned()) {
    if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<int64_t>() >= 0)) {
      throw ConfigError(path + ": expected a non-negative integer, got " + value.dump());
    }
  } else if (tmpl.is_number_integer()) {
    if (!is_integer(value)) throw ConfigError(path + ": expected an integer, got " + value.dump());
  } else if (tmpl.is_number_float()) {
    if (!value.is_number()) throw ConfigError(path + ": expected a number, got " + value.dump());
  } else if (tmpl.is_string()) {
    if (!value.is_string()) throw ConfigError(path + ": expected a string, got " + value.dump());
  } else if (tmpl.is_boolean()) {
    if (!value.is_boolean()) throw ConfigError(path + ": expected true or false, got " + value.dump());
  } else if (tmpl.is_array()) {
    if (!value.is_array()) throw ConfigError(path + ": expected an array, got " + value.dump());
    for (size_t i = 0; i < value.size(); ++i) {
      if (!value[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]: expected a number");
    }
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

void apply_set(json& doc, const json& tmpl, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  json* node = &doc;
  const json* t = &tmpl;
  size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!t->is_object() || !t->contains(key)) throw ConfigError(path + ": unknown field");
    t = &t->at(key);
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = parse_value(assignment.substr(eq + 1));
  if (t->is_string() && !value.is_string()) value = json(assignment.substr(eq + 1));
  check_node(*t, value, path);
  *node = value;
}

}  // namespace

std::string RunConfig::hash() const {
  if (sodium_init() < 0) throw Error("libsodium failed to initialize");
  const std::string canonical = doc.dump();  // object keys are sorted
  unsigned char digest[crypto_hash_sha256_BYTES];
  crypto_hash_sha256(digest, reinterpret_cast<const unsigned char*>(canonical.data()), canonical.size());
  char hex[crypto_hash_sha256_BYTES * 2 + 1];
  sodium_bin2hex(hex, sizeof hex, digest, sizeof digest);
  return hex;
}

json default_config() {
  DipoConfig rl;
  ServiceConfig service;
  return json{{"data", data_json(DataConfig{})},
              {"model", ModelConfig{}},
              {"sft", SftConfig{}},
              {"rl", rl},
              {"decode", DecodePolicy{}},
              {"service", service},
              {"eval", json{{"thresholds", EvalConfig{}.thresholds}}}};
}

RunConfig parse_config(const json& doc) {
  check_node(default_config(), doc, "");
  RunConfig c;
  c.doc = doc;
  try {
    const json& d = doc.at("data");
    c.data.digits = d.at("digits").get<int>();
    c.data.train_size = d.at("train_size").get<int64_t>();
    c.data.eval_size = d.at("eval_size").get<int64_t>();
    c.data.seed = d.at("seed").get<uint64_t>();
    c.model = doc.at("model").get<ModelConfig>();
    c.sft = doc.at("sft").get<SftConfig>();
    c.rl = doc.at("rl").get<DipoConfig>();
    c.decode = doc.at("decode").get<DecodePolicy>();
    c.service = doc.at("service").get<ServiceConfig>();
    c.eval.thresholds = doc.at("eval").at("thresholds").get<std::vector<float>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.data.digits < 1 || c.data.digits > 9) throw ConfigError("data.digits: must be in [1, 9]");
  if (c.data.train_size < 1) throw ConfigError("data.train_size: must be >= 1");
  if (c.data.eval_size < 1) throw ConfigError("data.eval_size: must be >= 1");
  for (float t : c.eval.thresholds) {
    if (!(t > 0.0f && t <= 1.0f)) throw ConfigError("eval.thresholds: values must be in (0, 1]");
  }
  c.model.validate();
  c.sft.validate();
  c.rl.validate();
  c.decode.validate();
  c.service.validate();
  return c;
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                         std::optional<uint64_t> seed) {
  const json tmpl = default_config();
  json doc = tmpl;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(file->string() + ": invalid JSON: " + e.what());
    }
    check_node(tmpl, doc, "");
  }
  for (const std::string& s : sets) apply_set(doc, tmpl, s);
  if (seed) {
    for (const char* section : {"data", "model", "sft", "rl"}) doc[section]["seed"] = *seed;
  }
  return parse_config(doc);
}

}  // namespace bdlm::cli
