// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "bdlm/mask_spec.hpp"
#include "bdlm/tensor.hpp"

namespace bdlm {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int32_t id_ = -1;
};

/// Reverse-mode tape. Ops append nodes in evaluation order; backward() walks
/// them in exact reverse order. A tape is single-threaded; independent tapes
/// may run concurrently over shared read-only tensors.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const float> out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. The backward function is kept only when gradients
  /// are enabled and at least one input requires them.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  void backward(const Var& loss);
  /// Gradient of the last backward() w.r.t. v; zeros when v was unreachable.
  Tensor grad(const Var& v) const;

  /// Accumulator for node `v`, allocated (zeroed) on first use.
  std::span<float> grad_buffer(const Var& v);

  const Tensor& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<float> grad;
  };

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

// ---- primitive ops --------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
Var exp(const Var& a);
/// Elementwise minimum; ties route the gradient to `a`.
Var minimum(const Var& a, const Var& b);
/// Gradient passes where lo <= x <= hi.
Var clamp(const Var& a, float lo, float hi);
Var sum(const Var& a);

/// x[n x d] + bias[d] broadcast over rows.
Var add_bias(const Var& x, const Var& bias);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f);
/// tanh-approximated GELU.
Var gelu(const Var& x);
Var embedding(const Var& table, std::span<const int32_t> ids);
Var concat_rows(const Var& a, const Var& b);
Var select_rows(const Var& x, std::span<const int64_t> rows);

/// Values unchanged; contributes no gradient to x.
Var stop_gradient(const Var& x);

/// softmax(q k^T / sqrt(d_head) + bias) v per head, with bias = -inf on
/// invisible pairs. q is [nq x d]; k and v are [nk x d].
Var masked_attention(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, int64_t n_heads);
Var masked_attention(const Var& q, const Var& k, const Var& v, const MaskSpec& mask, int64_t n_heads = 1);

enum class Reduction { Sum, WeightedMean };

/// Sum_i w_i * CE_i, or that sum divided by Sum_i w_i (0 when all weights are 0).
Var softmax_cross_entropy(const Var& logits, std::span<const int32_t> targets, std::span<const float> weights,
                          Reduction reduction = Reduction::WeightedMean);

/// log softmax(logits[rows[i]])[targets[i]] as a rank-1 tensor.
Var token_logprobs(const Var& logits, std::span<const int64_t> rows, std::span<const int32_t> targets);

/// Numerically stable log-softmax of one row, in place.
void log_softmax_inplace(std::span<float> row);

}  // namespace bdlm
