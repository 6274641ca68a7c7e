// SPDX-License-Identifier: Apache-2.0

#include "bdlm/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "bdlm/error.hpp"

namespace bdlm {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;
using CStrided = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;
using MStrided = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Var& a, int64_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Applies f elementwise and records df/dx * out_grad as the backward.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = f(x[i]);
  Tensor y(x.shape(), std::move(out));
  return a.tape().record(y, {a}, [a, x, y, df](Tape& t, std::span<const float> g) {
    auto ga = t.grad_buffer(a);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[static_cast<int64_t>(i)], y[static_cast<int64_t>(i)]);
  });
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), requires_grad && grad_enabled_, {}, {}});
  return Var(this, static_cast<int32_t>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ContractError("op mixes vars from different tapes");
    needs = needs || in.requires_grad();
  }
  needs = needs && grad_enabled_;
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, {}});
  return Var(this, static_cast<int32_t>(nodes_.size() - 1));
}

void Tape::backward(const Var& loss) {
  if (loss.value().numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  for (Node& n : nodes_) n.grad.clear();
  if (!loss.requires_grad()) return;
  grad_buffer(loss)[0] = 1.0f;
  for (int64_t id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[static_cast<size_t>(v.id())];
  if (n.grad.empty()) return Tensor::zeros(n.value.shape());
  return Tensor(n.value.shape(), n.grad);
}

std::span<float> Tape::grad_buffer(const Var& v) {
  Node& n = nodes_[static_cast<size_t>(v.id())];
  if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.value.numel()), 0.0f);
  return n.grad;
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const int64_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  if (y.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(x.shape()) + " * " + shape_str(y.shape()));
  }
  std::vector<float> out(static_cast<size_t>(m * n));
  MMap(out.data(), m, n).noalias() = CMap(x.ptr(), m, k) * CMap(y.ptr(), k, n);
  return a.tape().record(Tensor({m, n}, std::move(out)), {a, b}, [a, b, x, y, m, k, n](Tape& t, std::span<const float> g) {
    CMap gm(g.data(), m, n);
    if (a.requires_grad()) MMap(t.grad_buffer(a).data(), m, k).noalias() += gm * CMap(y.ptr(), k, n).transpose();
    if (b.requires_grad()) MMap(t.grad_buffer(b).data(), k, n).noalias() += CMap(x.ptr(), m, k).transpose() * gm;
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const Tensor& x = a.value();
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<float> out(static_cast<size_t>(m * n));
  MMap(out.data(), n, m) = CMap(x.ptr(), m, n).transpose();
  return a.tape().record(Tensor({n, m}, std::move(out)), {a}, [a, m, n](Tape& t, std::span<const float> g) {
    MMap(t.grad_buffer(a).data(), m, n) += CMap(g.data(), n, m).transpose();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = x[i] + y[i];
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a, b}, [a, b](Tape& t, std::span<const float> g) {
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = x[i] - y[i];
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a, b}, [a, b](Tape& t, std::span<const float> g) {
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = x[i] * y[i];
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a, b}, [a, b, x, y](Tape& t, std::span<const float> g) {
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[static_cast<int64_t>(i)];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[static_cast<int64_t>(i)];
    }
  });
}

Var scale(const Var& a, float s) {
  return unary(a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Var add_scalar(const Var& a, float s) {
  return unary(a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Var exp(const Var& a) {
  return unary(a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Var minimum(const Var& a, const Var& b) {
  require_same_shape(a, b, "minimum");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = std::min(x[i], y[i]);
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a, b}, [a, b, x, y](Tape& t, std::span<const float> g) {
    for (size_t i = 0; i < g.size(); ++i) {
      const auto j = static_cast<int64_t>(i);
      if (x[j] <= y[j]) {
        if (a.requires_grad()) t.grad_buffer(a)[i] += g[i];
      } else if (b.requires_grad()) {
        t.grad_buffer(b)[i] += g[i];
      }
    }
  });
}

Var clamp(const Var& a, float lo, float hi) {
  return unary(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

Var sum(const Var& a) {
  const Tensor& x = a.value();
  float s = 0.0f;
  for (float v : x.data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, std::span<const float> g) {
    auto ga = t.grad_buffer(a);
    for (float& v : ga) v += g[0];
  });
}

Var add_bias(const Var& x, const Var& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const Tensor& xv = x.value();
  const int64_t n = xv.dim(0), d = xv.dim(1);
  if (bias.value().dim(0) != d) throw DimensionError("add_bias: bias length " + shape_str(bias.shape()) + " vs " + shape_str(xv.shape()));
  const Tensor& bv = bias.value();
  std::vector<float> out(static_cast<size_t>(n * d));
  MMap(out.data(), n, d) = CMap(xv.ptr(), n, d).rowwise() + CMap(bv.ptr(), 1, d).row(0);
  return x.tape().record(Tensor({n, d}, std::move(out)), {x, bias}, [x, bias, n, d](Tape& t, std::span<const float> g) {
    if (x.requires_grad()) MMap(t.grad_buffer(x).data(), n, d) += CMap(g.data(), n, d);
    if (bias.requires_grad()) {
      const Eigen::RowVectorXf gb = CMap(g.data(), n, d).colwise().sum();
      MMap(t.grad_buffer(bias).data(), 1, d) += gb;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps) {
  require_rank(x, 2, "layer_norm");
  const Tensor& xv = x.value();
  const int64_t n = xv.dim(0), d = xv.dim(1);
  if (gain.value().numel() != d || bias.value().numel() != d) throw DimensionError("layer_norm: parameter size mismatch");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(n * d));
  auto rstd = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  std::vector<float> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    const float* row = xv.ptr() + i * d;
    float mean = 0.0f;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<float>(d);
    const float r = 1.0f / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(i)] = r;
    for (int64_t j = 0; j < d; ++j) {
      const float h = (row[j] - mean) * r;
      (*xhat)[static_cast<size_t>(i * d + j)] = h;
      out[static_cast<size_t>(i * d + j)] = h * gv[j] + bv[j];
    }
  }
  return x.tape().record(
      Tensor({n, d}, std::move(out)), {x, gain, bias}, [x, gain, bias, gv, xhat, rstd, n, d](Tape& t, std::span<const float> g) {
        if (gain.requires_grad() || bias.requires_grad()) {
          auto gg = gain.requires_grad() ? t.grad_buffer(gain) : std::span<float>{};
          auto gb = bias.requires_grad() ? t.grad_buffer(bias) : std::span<float>{};
          for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < d; ++j) {
              const auto k = static_cast<size_t>(i * d + j);
              if (!gg.empty()) gg[static_cast<size_t>(j)] += g[k] * (*xhat)[k];
              if (!gb.empty()) gb[static_cast<size_t>(j)] += g[k];
            }
          }
        }
        if (!x.requires_grad()) return;
        auto gx = t.grad_buffer(x);
        std::vector<float> dh(static_cast<size_t>(d));
        for (int64_t i = 0; i < n; ++i) {
          float mean_dh = 0.0f, mean_dh_h = 0.0f;
          for (int64_t j = 0; j < d; ++j) {
            const auto k = static_cast<size_t>(i * d + j);
            dh[static_cast<size_t>(j)] = g[k] * gv[j];
            mean_dh += dh[static_cast<size_t>(j)];
            mean_dh_h += dh[static_cast<size_t>(j)] * (*xhat)[k];
          }
          mean_dh /= static_cast<float>(d);
          mean_dh_h /= static_cast<float>(d);
          const float r = (*rstd)[static_cast<size_t>(i)];
          for (int64_t j = 0; j < d; ++j) {
            const auto k = static_cast<size_t>(i * d + j);
            gx[k] += r * (dh[static_cast<size_t>(j)] - mean_dh - (*xhat)[k] * mean_dh_h);
          }
        }
      });
}

Var gelu(const Var& x) {
  static constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  static constexpr float a = 0.044715f;
  const Tensor& xv = x.value();
  const Eigen::Index n = xv.numel();
  Eigen::Map<const Eigen::ArrayXf> xa(xv.ptr(), n);
  auto th = std::make_shared<Eigen::ArrayXf>((c * (xa + a * xa.cube())).tanh());
  std::vector<float> out(static_cast<size_t>(n));
  Eigen::Map<Eigen::ArrayXf>(out.data(), n) = 0.5f * xa * (1.0f + *th);
  return x.tape().record(Tensor(xv.shape(), std::move(out)), {x}, [x, xv, th, n](Tape& t, std::span<const float> g) {
    Eigen::Map<const Eigen::ArrayXf> xa(xv.ptr(), n), ga(g.data(), n);
    const Eigen::ArrayXf& h = *th;
    // Evaluated into an aligned temporary so results do not depend on the
    // address of the grad buffer (Eigen peels unaligned heads to scalar code).
    const Eigen::ArrayXf dx = ga * (0.5f * (1.0f + h) + 0.5f * xa * (1.0f - h.square()) * c * (1.0f + 3.0f * a * xa.square()));
    Eigen::Map<Eigen::ArrayXf>(t.grad_buffer(x).data(), n) += dx;
  });
}

Var embedding(const Var& table, std::span<const int32_t> ids) {
  require_rank(table, 2, "embedding");
  const Tensor& tv = table.value();
  const int64_t rows = tv.dim(0), d = tv.dim(1);
  const auto n = static_cast<int64_t>(ids.size());
  std::vector<float> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    const int32_t id = ids[static_cast<size_t>(i)];
    if (id < 0 || id >= rows) {
      throw IndexError("embedding index " + std::to_string(id) + " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.ptr() + id * d, d, out.begin() + i * d);
  }
  std::vector<int32_t> idx(ids.begin(), ids.end());
  return table.tape().record(Tensor({n, d}, std::move(out)), {table}, [table, idx, d](Tape& t, std::span<const float> g) {
    auto gt = t.grad_buffer(table);
    for (size_t i = 0; i < idx.size(); ++i) {
      const size_t base = static_cast<size_t>(idx[i]) * static_cast<size_t>(d);
      for (int64_t j = 0; j < d; ++j) gt[base + static_cast<size_t>(j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
    }
  });
}

Var concat_rows(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.dim(1) != y.dim(1)) throw DimensionError("concat_rows: column mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  std::vector<float> out(x.data().begin(), x.data().end());
  out.insert(out.end(), y.data().begin(), y.data().end());
  const size_t split = static_cast<size_t>(x.numel());
  return a.tape().record(Tensor({x.dim(0) + y.dim(0), x.dim(1)}, std::move(out)), {a, b},
                         [a, b, split](Tape& t, std::span<const float> g) {
                           if (a.requires_grad()) {
                             auto ga = t.grad_buffer(a);
                             for (size_t i = 0; i < split; ++i) ga[i] += g[i];
                           }
                           if (b.requires_grad()) {
                             auto gb = t.grad_buffer(b);
                             for (size_t i = split; i < g.size(); ++i) gb[i - split] += g[i];
                           }
                         });
}

Var select_rows(const Var& x, std::span<const int64_t> rows) {
  require_rank(x, 2, "select_rows");
  const Tensor& xv = x.value();
  const int64_t d = xv.dim(1);
  std::vector<float> out;
  out.reserve(rows.size() * static_cast<size_t>(d));
  for (int64_t r : rows) {
    if (r < 0 || r >= xv.dim(0)) throw IndexError("select_rows: row " + std::to_string(r) + " out of range");
    out.insert(out.end(), xv.ptr() + r * d, xv.ptr() + (r + 1) * d);
  }
  std::vector<int64_t> idx(rows.begin(), rows.end());
  return x.tape().record(Tensor({static_cast<int64_t>(rows.size()), d}, std::move(out)), {x},
                         [x, idx, d](Tape& t, std::span<const float> g) {
                           auto gx = t.grad_buffer(x);
                           for (size_t i = 0; i < idx.size(); ++i) {
                             for (int64_t j = 0; j < d; ++j) {
                               gx[static_cast<size_t>(idx[i] * d + j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
                             }
                           }
                         });
}

Var stop_gradient(const Var& x) { return x.tape().constant(x.value()); }

Var masked_attention(const Var& q, const Var& k, const Var& v, const MaskSpec& mask, int64_t n_heads) {
  return masked_attention(q, k, v, AttentionMask(mask), n_heads);
}

Var masked_attention(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, int64_t n_heads) {
  require_rank(q, 2, "masked_attention");
  require_rank(k, 2, "masked_attention");
  require_rank(v, 2, "masked_attention");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const int64_t nq = qv.dim(0), nk = kv.dim(0), d = qv.dim(1);
  if (kv.dim(1) != d || vv.dim(1) != d || vv.dim(0) != nk) {
    throw DimensionError("masked_attention: q/k/v shapes " + shape_str(qv.shape()) + ", " + shape_str(kv.shape()) + ", " +
                         shape_str(vv.shape()) + " disagree");
  }
  if (n_heads < 1 || d % n_heads != 0) throw DimensionError("masked_attention: head count does not divide width");
  if (mask.query_len() != nq || mask.key_len() > nk) {
    throw DimensionError("masked_attention: mask covers " + std::to_string(mask.query_len()) + "x" +
                         std::to_string(mask.key_len()) + " but inputs are " + std::to_string(nq) + "x" + std::to_string(nk));
  }
  std::vector<int> covered(static_cast<size_t>(nq), 0);
  for (const MaskSegment& s : mask.segments()) {
    s.mask.require_nonempty_rows();
    for (int64_t i = 0; i < s.mask.query_len(); ++i) ++covered[static_cast<size_t>(s.query_offset + i)];
  }
  for (int64_t i = 0; i < nq; ++i) {
    if (covered[static_cast<size_t>(i)] != 1) {
      throw ContractError("attention query row " + std::to_string(i) + " is covered by " +
                          std::to_string(covered[static_cast<size_t>(i)]) + " mask segments");
    }
  }

  const int64_t dh = d / n_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  const auto n_seg = mask.segments().size();
  // probs[seg * n_heads + h] holds the [ql x kl] attention matrix.
  auto probs = std::make_shared<std::vector<MatR>>(n_seg * static_cast<size_t>(n_heads));
  std::vector<float> out(static_cast<size_t>(nq * d), 0.0f);
  constexpr float neg_inf = -std::numeric_limits<float>::infinity();

  for (size_t s = 0; s < n_seg; ++s) {
    const MaskSegment& seg = mask.segments()[s];
    const int64_t ql = seg.mask.query_len(), kl = seg.mask.key_len();
    for (int64_t h = 0; h < n_heads; ++h) {
      CStrided qs(qv.ptr() + seg.query_offset * d + h * dh, ql, dh, Eigen::OuterStride<>(d));
      CStrided ks(kv.ptr() + seg.key_offset * d + h * dh, kl, dh, Eigen::OuterStride<>(d));
      CStrided vs(vv.ptr() + seg.key_offset * d + h * dh, kl, dh, Eigen::OuterStride<>(d));
      MatR& p = (*probs)[s * static_cast<size_t>(n_heads) + static_cast<size_t>(h)];
      p.noalias() = (qs * ks.transpose()) * inv_sqrt;
      for (int64_t i = 0; i < ql; ++i) {
        float mx = neg_inf;
        for (int64_t j = 0; j < kl; ++j) {
          if (!seg.mask.visible(i, j)) {
            p(i, j) = neg_inf;
          } else {
            mx = std::max(mx, p(i, j));
          }
        }
        p.row(i) = (p.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
      }
      MStrided os(out.data() + seg.query_offset * d + h * dh, ql, dh, Eigen::OuterStride<>(d));
      os.noalias() = p * vs;
    }
  }

  auto segs = std::make_shared<std::vector<MaskSegment>>(mask.segments());
  return q.tape().record(
      Tensor({nq, d}, std::move(out)), {q, k, v},
      [q, k, v, qv, kv, vv, probs, segs, n_heads, d, dh, inv_sqrt](Tape& t, std::span<const float> g) {
        float* gq = q.requires_grad() ? t.grad_buffer(q).data() : nullptr;
        float* gk = k.requires_grad() ? t.grad_buffer(k).data() : nullptr;
        float* gv = v.requires_grad() ? t.grad_buffer(v).data() : nullptr;
        MatR dp, ds;
        for (size_t s = 0; s < segs->size(); ++s) {
          const MaskSegment& seg = (*segs)[s];
          const int64_t ql = seg.mask.query_len(), kl = seg.mask.key_len();
          for (int64_t h = 0; h < n_heads; ++h) {
            const MatR& p = (*probs)[s * static_cast<size_t>(n_heads) + static_cast<size_t>(h)];
            CStrided go(g.data() + seg.query_offset * d + h * dh, ql, dh, Eigen::OuterStride<>(d));
            CStrided qs(qv.ptr() + seg.query_offset * d + h * dh, ql, dh, Eigen::OuterStride<>(d));
            CStrided ks(kv.ptr() + seg.key_offset * d + h * dh, kl, dh, Eigen::OuterStride<>(d));
            CStrided vs(vv.ptr() + seg.key_offset * d + h * dh, kl, dh, Eigen::OuterStride<>(d));
            if (gv) {
              MStrided(gv + seg.key_offset * d + h * dh, kl, dh, Eigen::OuterStride<>(d)).noalias() += p.transpose() * go;
            }
            if (!gq && !gk) continue;
            dp.noalias() = go * vs.transpose();
            ds = p.cwiseProduct(dp);
            const Eigen::VectorXf row_dot = ds.rowwise().sum();
            ds.noalias() -= (p.array().colwise() * row_dot.array()).matrix();
            ds *= inv_sqrt;
            if (gq) MStrided(gq + seg.query_offset * d + h * dh, ql, dh, Eigen::OuterStride<>(d)).noalias() += ds * ks;
            if (gk) MStrided(gk + seg.key_offset * d + h * dh, kl, dh, Eigen::OuterStride<>(d)).noalias() += ds.transpose() * qs;
          }
        }
      });
}

void log_softmax_inplace(std::span<float> row) {
  float mx = -std::numeric_limits<float>::infinity();
  for (float x : row) mx = std::max(mx, x);
  float total = 0.0f;
  for (float x : row) total += std::exp(x - mx);
  const float lse = mx + std::log(total);
  for (float& x : row) x -= lse;
}

Var softmax_cross_entropy(const Var& logits, std::span<const int32_t> targets, std::span<const float> weights,
                          Reduction reduction) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const Tensor& lv = logits.value();
  const int64_t n = lv.dim(0), vocab = lv.dim(1);
  if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(weights.size()) != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(n) + " rows but " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(weights.size()) + " weights");
  }
  float weight_total = 0.0f;
  for (int64_t i = 0; i < n; ++i) {
    const int32_t tgt = targets[static_cast<size_t>(i)];
    if (tgt < 0 || tgt >= vocab) {
      throw IndexError("cross-entropy target " + std::to_string(tgt) + " outside vocabulary of " + std::to_string(vocab));
    }
    if (weights[static_cast<size_t>(i)] < 0.0f) throw ContractError("cross-entropy weight must be >= 0");
    weight_total += weights[static_cast<size_t>(i)];
  }
  const float coef = reduction == Reduction::Sum ? 1.0f : (weight_total > 0.0f ? 1.0f / weight_total : 0.0f);

  auto logp = std::make_shared<std::vector<float>>(lv.data().begin(), lv.data().end());
  float loss = 0.0f;
  for (int64_t i = 0; i < n; ++i) {
    const float w = weights[static_cast<size_t>(i)];
    if (w == 0.0f) continue;
    std::span<float> row(logp->data() + i * vocab, static_cast<size_t>(vocab));
    log_softmax_inplace(row);
    loss -= w * row[static_cast<size_t>(targets[static_cast<size_t>(i)])];
  }
  loss *= coef;

  std::vector<int32_t> tg(targets.begin(), targets.end());
  std::vector<float> wt(weights.begin(), weights.end());
  return logits.tape().record(Tensor::scalar(loss), {logits}, [logits, logp, tg, wt, coef, vocab](Tape& t, std::span<const float> g) {
    auto gl = t.grad_buffer(logits);
    for (size_t i = 0; i < tg.size(); ++i) {
      const float w = wt[i] * coef * g[0];
      if (w == 0.0f) continue;
      const size_t base = i * static_cast<size_t>(vocab);
      for (int64_t j = 0; j < vocab; ++j) gl[base + static_cast<size_t>(j)] += w * std::exp((*logp)[base + static_cast<size_t>(j)]);
      gl[base + static_cast<size_t>(tg[i])] -= w;
    }
  });
}

Var token_logprobs(const Var& logits, std::span<const int64_t> rows, std::span<const int32_t> targets) {
  require_rank(logits, 2, "token_logprobs");
  const Tensor& lv = logits.value();
  const int64_t vocab = lv.dim(1);
  if (rows.size() != targets.size()) throw DimensionError("token_logprobs: rows/targets length mismatch");
  const size_t m = rows.size();
  auto logp = std::make_shared<std::vector<float>>(m * static_cast<size_t>(vocab));
  std::vector<float> out(m);
  for (size_t i = 0; i < m; ++i) {
    const int64_t r = rows[i];
    const int32_t tgt = targets[i];
    if (r < 0 || r >= lv.dim(0)) throw IndexError("token_logprobs: row " + std::to_string(r) + " out of range");
    if (tgt < 0 || tgt >= vocab) throw IndexError("token_logprobs: target " + std::to_string(tgt) + " outside vocabulary");
    std::span<float> row(logp->data() + i * static_cast<size_t>(vocab), static_cast<size_t>(vocab));
    std::copy_n(lv.ptr() + r * vocab, vocab, row.begin());
    log_softmax_inplace(row);
    out[i] = row[static_cast<size_t>(tgt)];
  }
  std::vector<int64_t> rw(rows.begin(), rows.end());
  std::vector<int32_t> tg(targets.begin(), targets.end());
  return logits.tape().record(Tensor({static_cast<int64_t>(m)}, std::move(out)), {logits},
                              [logits, logp, rw, tg, vocab](Tape& t, std::span<const float> g) {
                                auto gl = t.grad_buffer(logits);
                                for (size_t i = 0; i < rw.size(); ++i) {
                                  if (g[i] == 0.0f) continue;
                                  const size_t base = static_cast<size_t>(rw[i]) * static_cast<size_t>(vocab);
                                  const size_t lbase = i * static_cast<size_t>(vocab);
                                  for (int64_t j = 0; j < vocab; ++j) {
                                    gl[base + static_cast<size_t>(j)] -= g[i] * std::exp((*logp)[lbase + static_cast<size_t>(j)]);
                                  }
                                  gl[base + static_cast<size_t>(tg[i])] += g[i];
                                }
                              });
}

}  // namespace bdlm
