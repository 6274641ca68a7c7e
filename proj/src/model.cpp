// SPDX-License-Identifier: Apache-2.0

#include "bdlm/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "bdlm/error.hpp"

namespace bdlm {

namespace {

std::string layer_name(int64_t layer, const char* suffix) {
  return "layers." + std::to_string(layer) + "." + suffix;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("model." + field + ": " + why); };
  if (vocab_size < 2) fail("vocab_size", "must be >= 2");
  if (d_model < 1) fail("d_model", "must be >= 1");
  if (n_layers < 1) fail("n_layers", "must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (block_size < 1) fail("block_size", "must be >= 1");
  if (max_seq_len < block_size) fail("max_seq_len", "must hold at least one block");
  for (auto [field, id] : {std::pair{"mask_token_id", mask_token_id}, std::pair{"pad_token_id", pad_token_id},
                           std::pair{"bos_token_id", bos_token_id}, std::pair{"eos_token_id", eos_token_id}}) {
    if (id < 0 || id >= vocab_size) fail(field, "must be in [0, vocab_size)");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},       {"d_model", c.d_model},
                     {"n_layers", c.n_layers},           {"n_heads", c.n_heads},
                     {"max_seq_len", c.max_seq_len},     {"block_size", c.block_size},
                     {"mask_token_id", c.mask_token_id}, {"pad_token_id", c.pad_token_id},
                     {"bos_token_id", c.bos_token_id},   {"eos_token_id", c.eos_token_id},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.block_size = j.value("block_size", d.block_size);
  c.mask_token_id = j.value("mask_token_id", d.mask_token_id);
  c.pad_token_id = j.value("pad_token_id", d.pad_token_id);
  c.bos_token_id = j.value("bos_token_id", d.bos_token_id);
  c.eos_token_id = j.value("eos_token_id", d.eos_token_id);
  c.seed = j.value("seed", d.seed);
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw IndexError("no parameter named " + name);
  return it->second;
}

int64_t ModelParams::count() const {
  int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

std::map<std::string, Shape> param_shapes(const ModelConfig& cfg) {
  const int64_t d = cfg.d_model;
  const int64_t ff = 4 * d;
  std::map<std::string, Shape> shapes;
  shapes["tok_emb"] = {cfg.vocab_size, d};
  shapes["pos_emb"] = {cfg.max_seq_len, d};
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    for (const char* ln : {"ln1.g", "ln1.b", "ln2.g", "ln2.b"}) shapes[layer_name(l, ln)] = {d};
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) shapes[layer_name(l, w)] = {d, d};
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) shapes[layer_name(l, b)] = {d};
    shapes[layer_name(l, "mlp.w1")] = {d, ff};
    shapes[layer_name(l, "mlp.b1")] = {ff};
    shapes[layer_name(l, "mlp.w2")] = {ff, d};
    shapes[layer_name(l, "mlp.b2")] = {d};
  }
  shapes["ln_f.g"] = {d};
  shapes["ln_f.b"] = {d};
  shapes["head.w"] = {d, cfg.vocab_size};
  shapes["head.b"] = {cfg.vocab_size};
  return shapes;
}

int64_t param_count(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& [name, shape] : param_shapes(cfg)) n += shape_numel(shape);
  return n;
}

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams params;
  params.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float residual_std = 0.02f / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
  for (const auto& [name, shape] : param_shapes(cfg)) {
    const std::string leaf = name.substr(name.rfind('.') + 1);
    const int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n), 0.0f);
    if (leaf == "g") {
      std::fill(data.begin(), data.end(), 1.0f);
    } else if (leaf.starts_with('w') || name.ends_with("_emb")) {
      const float std_dev = (leaf == "wo" || leaf == "w2") ? residual_std : 0.02f;
      for (float& x : data) x = std_dev * normal(rng);
    }
    params.tensors.emplace(name, Tensor(shape, std::move(data)));
  }
  return params;
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool requires_grad)
    : tape_(&tape), config_(&params.config) {
  for (const auto& [name, t] : params.tensors) vars_.emplace(name, tape.leaf(t, requires_grad));
}

const Var& BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw IndexError("no parameter named " + name);
  return it->second;
}

GradMap BoundParams::grads() const {
  GradMap out;
  for (const auto& [name, v] : vars_) out.emplace(name, tape_->grad(v).to_vector());
  return out;
}

namespace {

// Shared transformer body. With `cache`, keys/values of committed positions
// are prepended in every layer; with `block`, this forward's own keys/values
// are captured per layer.
Var transformer(const BoundParams& p, std::span<const int32_t> tokens, std::span<const int32_t> positions,
                const AttentionMask& mask, const KvCache* cache, BlockForward* block) {
  const ModelConfig& cfg = p.config();
  if (tokens.size() != positions.size()) {
    throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens but " + std::to_string(positions.size()) +
                         " positions");
  }
  for (int32_t pos : positions) {
    if (pos < 0 || pos >= cfg.max_seq_len) {
      throw IndexError("position " + std::to_string(pos) + " outside max_seq_len " + std::to_string(cfg.max_seq_len));
    }
  }
  Tape& tape = p.tape();
  Var x = add(embedding(p["tok_emb"], tokens), embedding(p["pos_emb"], positions));
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    auto w = [&](const char* s) -> const Var& { return p[layer_name(l, s)]; };
    Var h = layer_norm(x, w("ln1.g"), w("ln1.b"));
    Var q = add_bias(matmul(h, w("attn.wq")), w("attn.bq"));
    Var k = add_bias(matmul(h, w("attn.wk")), w("attn.bk"));
    Var v = add_bias(matmul(h, w("attn.wv")), w("attn.bv"));
    if (block) {
      block->keys.push_back(k.value());
      block->values.push_back(v.value());
    }
    if (cache && cache->length() > 0) {
      k = concat_rows(tape.constant(cache->keys()[static_cast<size_t>(l)]), k);
      v = concat_rows(tape.constant(cache->values()[static_cast<size_t>(l)]), v);
    }
    Var a = masked_attention(q, k, v, mask, cfg.n_heads);
    x = add(x, add_bias(matmul(a, w("attn.wo")), w("attn.bo")));
    h = layer_norm(x, w("ln2.g"), w("ln2.b"));
    Var m = gelu(add_bias(matmul(h, w("mlp.w1")), w("mlp.b1")));
    x = add(x, add_bias(matmul(m, w("mlp.w2")), w("mlp.b2")));
  }
  x = layer_norm(x, p["ln_f.g"], p["ln_f.b"]);
  return add_bias(matmul(x, p["head.w"]), p["head.b"]);
}

}  // namespace

Var forward_on_tape(const BoundParams& params, std::span<const int32_t> tokens, std::span<const int32_t> positions,
                    const AttentionMask& mask) {
  return transformer(params, tokens, positions, mask, nullptr, nullptr);
}

Tensor forward(const ModelParams& params, std::span<const int32_t> tokens, std::span<const int32_t> positions,
               const MaskSpec& mask) {
  Tape tape(false);
  BoundParams bound(tape, params, false);
  return transformer(bound, tokens, positions, AttentionMask(mask), nullptr, nullptr).value();
}

KvCache::KvCache(const ModelConfig& cfg) : d_model_(cfg.d_model) {
  keys_.assign(static_cast<size_t>(cfg.n_layers), Tensor::zeros({0, cfg.d_model}));
  values_.assign(static_cast<size_t>(cfg.n_layers), Tensor::zeros({0, cfg.d_model}));
}

void KvCache::commit(const BlockForward& block) {
  if (block.keys.size() != keys_.size()) throw ContractError("KV commit: layer count mismatch");
  if (block.positions.empty()) return;
  for (size_t i = 0; i < block.positions.size(); ++i) {
    if (block.positions[i] != length_ + static_cast<int64_t>(i)) {
      throw ContractError("KV commit: block starts at position " + std::to_string(block.positions.front()) +
                          " but cache holds " + std::to_string(length_) + " committed positions");
    }
  }
  auto append = [](const Tensor& a, const Tensor& b) {
    std::vector<float> data(a.data().begin(), a.data().end());
    data.insert(data.end(), b.data().begin(), b.data().end());
    return Tensor({a.dim(0) + b.dim(0), a.dim(1)}, std::move(data));
  };
  for (size_t l = 0; l < keys_.size(); ++l) {
    keys_[l] = append(keys_[l], block.keys[l]);
    values_[l] = append(values_[l], block.values[l]);
  }
  length_ += static_cast<int64_t>(block.positions.size());
}

BlockForward forward_cached(const ModelParams& params, const KvCache& cache, std::span<const int32_t> block_tokens,
                            std::span<const int32_t> block_positions, const MaskSpec& intra_mask) {
  const auto n = static_cast<int64_t>(block_tokens.size());
  if (static_cast<int64_t>(block_positions.size()) != n) throw DimensionError("forward_cached: tokens/positions length mismatch");
  if (intra_mask.query_len() != n || intra_mask.key_len() != n) throw DimensionError("forward_cached: intra mask must be n x n");
  if (cache.keys().size() != static_cast<size_t>(params.config.n_layers)) throw ContractError("forward_cached: cache built for another model");
  for (int64_t i = 0; i < n; ++i) {
    if (block_positions[static_cast<size_t>(i)] < cache.length()) {
      throw ContractError("forward_cached: position " + std::to_string(block_positions[static_cast<size_t>(i)]) +
                          " overlaps the committed region of length " + std::to_string(cache.length()));
    }
    if (block_positions[static_cast<size_t>(i)] != cache.length() + i) {
      throw ContractError("forward_cached: block positions must be contiguous after the committed prefix");
    }
  }
  const int64_t prefix = cache.length();
  MaskSpec full(n, prefix + n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < prefix; ++j) full.set(i, j);
    for (int64_t j = 0; j < n; ++j) {
      if (intra_mask.visible(i, j)) full.set(i, prefix + j);
    }
  }
  Tape tape(false);
  BoundParams bound(tape, params, false);
  BlockForward out;
  out.positions.assign(block_positions.begin(), block_positions.end());
  out.logits = transformer(bound, block_tokens, block_positions, AttentionMask(std::move(full)), &cache, &out).value();
  return out;
}

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "BDLM1";

template <typename T>
void put_le(std::string& out, T value) {
  auto bits = std::bit_cast<std::array<char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  out.append(bits.data(), bits.size());
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le(const char* what) {
    std::array<char, sizeof(T)> bits{};
    take(bits.data(), sizeof(T), what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
    return std::bit_cast<T>(bits);
  }

  std::string get_string(uint64_t n, const char* what) {
    if (n > remaining()) throw FormatError(std::string("checkpoint truncated reading ") + what);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  void take(char* dst, size_t n, const char* what) {
    if (n > remaining()) throw FormatError(std::string("checkpoint truncated reading ") + what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  size_t pos_ = 0;
};

std::string metadata_text(const ModelParams& params) {
  nlohmann::json meta;
  meta["config"] = params.config;
  meta["version"] = params.version;
  return meta.dump();
}

}  // namespace

std::string serialize_params(const ModelParams& params) {
  std::string out;
  out.reserve(static_cast<size_t>(checkpoint_size(params)));
  out.append(kMagic);
  const std::string meta = metadata_text(params);
  put_le<uint64_t>(out, meta.size());
  out.append(meta);
  for (const auto& [name, t] : params.tensors) {
    put_le<uint64_t>(out, name.size());
    out.append(name);
    put_le<uint64_t>(out, static_cast<uint64_t>(t.rank()));
    for (int64_t d : t.shape()) put_le<uint64_t>(out, static_cast<uint64_t>(d));
    if constexpr (std::endian::native == std::endian::little) {
      out.append(reinterpret_cast<const char*>(t.ptr()), static_cast<size_t>(t.numel()) * sizeof(float));
    } else {
      for (float x : t.data()) put_le<float>(out, x);
    }
  }
  return out;
}

ModelParams deserialize_params(std::string_view bytes) {
  Reader r(bytes);
  std::string magic(kMagic.size(), '\0');
  r.take(magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("bad checkpoint magic");
  const auto meta_len = r.get_le<uint64_t>("metadata length");
  const std::string meta_text = r.get_string(meta_len, "metadata");
  ModelParams params;
  try {
    const auto meta = nlohmann::json::parse(meta_text);
    params.config = meta.at("config").get<ModelConfig>();
    params.version = meta.value("version", uint64_t{1});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint metadata: ") + e.what());
  }
  try {
    params.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  const auto expected = param_shapes(params.config);
  while (r.remaining() > 0) {
    const auto name_len = r.get_le<uint64_t>("name length");
    std::string name = r.get_string(name_len, "tensor name");
    const auto rank = r.get_le<uint64_t>("rank");
    if (rank > 8) throw FormatError("implausible rank for " + name);
    Shape shape;
    for (uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(r.get_le<uint64_t>("dims")));
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError("unexpected tensor " + name);
    if (it->second != shape) {
      throw FormatError("shape mismatch for " + name + ": file " + shape_str(shape) + ", config " + shape_str(it->second));
    }
    std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
    for (float& x : data) x = r.get_le<float>("tensor data");
    params.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (params.tensors.size() != expected.size()) {
    throw FormatError("checkpoint holds " + std::to_string(params.tensors.size()) + " tensors, config needs " +
                      std::to_string(expected.size()));
  }
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = serialize_params(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_params(ss.str());
}

int64_t checkpoint_size(const ModelParams& params) {
  int64_t n = static_cast<int64_t>(kMagic.size()) + 8 + static_cast<int64_t>(metadata_text(params).size());
  for (const auto& [name, t] : params.tensors) {
    n += 8 + static_cast<int64_t>(name.size()) + 8 + 8 * t.rank() + 4 * t.numel();
  }
  return n;
}

}  // namespace bdlm
