// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bdlm/autograd.hpp"
#include "bdlm/mask_spec.hpp"
#include "bdlm/optim.hpp"
#include "bdlm/tensor.hpp"
#include "json.hpp"

namespace bdlm {

struct ModelConfig {
  int32_t vocab_size = 32;
  int64_t d_model = 128;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t max_seq_len = 512;
  int64_t block_size = 8;
  int32_t mask_token_id = 17;
  int32_t pad_token_id = 16;
  int32_t bos_token_id = 14;
  int32_t eos_token_id = 15;
  uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Named dense parameters of the blockwise diffusion transformer. Names and
/// shapes are a pure function of the config.
struct ModelParams {
  ModelConfig config;
  TensorMap tensors;
  uint64_t version = 1;

  const Tensor& at(const std::string& name) const;
  int64_t count() const;
};

/// Name -> shape of every parameter implied by `cfg`.
std::map<std::string, Shape> param_shapes(const ModelConfig& cfg);
int64_t param_count(const ModelConfig& cfg);

ModelParams init_params(const ModelConfig& cfg);

/// Parameters bound as tape leaves for one forward/backward.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params, bool requires_grad);
  const Var& operator[](const std::string& name) const;
  const ModelConfig& config() const { return *config_; }
  Tape& tape() const { return *tape_; }
  /// Gradients after tape.backward(), keyed by parameter name.
  GradMap grads() const;

 private:
  Tape* tape_;
  const ModelConfig* config_;
  std::map<std::string, Var> vars_;
};

/// Logits [len x V] on a caller-owned tape. Position embeddings are looked up
/// from `positions`, so repeated copies of a block may share positions.
Var forward_on_tape(const BoundParams& params, std::span<const int32_t> tokens, std::span<const int32_t> positions,
                    const AttentionMask& mask);

/// Pure inference forward; never mutates params.
Tensor forward(const ModelParams& params, std::span<const int32_t> tokens, std::span<const int32_t> positions,
               const MaskSpec& mask);

struct BlockForward;

/// Per-layer keys/values of committed (fully decoded) positions.
class KvCache {
 public:
  KvCache() = default;
  explicit KvCache(const ModelConfig& cfg);

  int64_t length() const { return length_; }
  const std::vector<Tensor>& keys() const { return keys_; }
  const std::vector<Tensor>& values() const { return values_; }

  /// Appends the block's keys/values. The block must start exactly at length().
  void commit(const BlockForward& block);

 private:
  int64_t d_model_ = 0;
  int64_t length_ = 0;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
};

struct BlockForward {
  Tensor logits;                  // [n x V]
  std::vector<int32_t> positions; // absolute positions of the block tokens
  std::vector<Tensor> keys;       // per layer [n x d]
  std::vector<Tensor> values;
};

/// Forward of a block against a committed prefix. Block queries see every
/// cached key plus block keys allowed by `intra_mask` ([n x n]). Positions
/// must be contiguous starting at cache.length().
BlockForward forward_cached(const ModelParams& params, const KvCache& cache, std::span<const int32_t> block_tokens,
                            std::span<const int32_t> block_positions, const MaskSpec& intra_mask);

// ---- checkpoint format ----------------------------------------------------
//   "BDLM1" | u64 metadata length | metadata (UTF-8 JSON) |
//   per tensor, sorted by name: u64 name length | name | u64 rank |
//   rank x u64 dims | raw f32 data. All integers and floats little-endian.

std::string serialize_params(const ModelParams& params);
ModelParams deserialize_params(std::string_view bytes);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// Header size (magic + metadata) plus per-tensor records for `params`.
int64_t checkpoint_size(const ModelParams& params);

}  // namespace bdlm
