#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsnmt/errors.hpp"
#include "tsnmt/kernels.hpp"
#include "tsnmt/tensor.hpp"

namespace tsnmt {

namespace detail {

template <typename S>
Tensor<S> make_output(Tape<S>& tape, Shape shape, bool wants_grad) {
  (void)tape;
  return Tensor<S>::zeros(std::move(shape), wants_grad);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

}  // namespace detail

// a[..×k] · b[k×n]; leading axes of `a` are flattened into rows.
template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (b.shape().size() != 2 || a.cols() != b.shape()[0])
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const bool g = tape.wants_grad(a, b);
  auto out = detail::make_output(tape, out_shape, g);
  kernels::gemm(a.ptr(), b.ptr(), out.ptr(), m, k, n);
  if (g) {
    tape.record([a, b, out, m, k, n]() mutable {
      if (a.requires_grad()) {
        auto bt = kernels::transpose(b.ptr(), k, n);
        kernels::gemm_acc(out.grad_ptr(), bt.data(), a.grad_ptr(), m, n, k);
      }
      if (b.requires_grad()) kernels::gemm_tn_acc(a.ptr(), out.grad_ptr(), b.grad_ptr(), m, k, n);
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  const bool g = tape.wants_grad(a, b);
  auto out = detail::make_output(tape, a.shape(), g);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  if (g) {
    tape.record([a, b, out]() mutable {
      for (auto* t : {&a, &b})
        if (t->requires_grad())
          for (std::size_t i = 0; i < out.size(); ++i) t->grad()[i] += out.grad()[i];
    });
  }
  return out;
}

// a + lambda * b, the weighted sum used for combined objectives.
template <typename S>
Tensor<S> add_scaled(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b, S lambda) {
  detail::require_same_shape(a, b, "add_scaled");
  const bool g = tape.wants_grad(a, b);
  auto out = detail::make_output(tape, a.shape(), g);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + lambda * b[i];
  if (g) {
    tape.record([a, b, out, lambda]() mutable {
      if (a.requires_grad())
        for (std::size_t i = 0; i < out.size(); ++i) a.grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < out.size(); ++i) b.grad()[i] += lambda * out.grad()[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& x, S factor) {
  const bool g = tape.wants_grad(x);
  auto out = detail::make_output(tape, x.shape(), g);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  if (g) {
    tape.record([x, out, factor]() mutable {
      for (std::size_t i = 0; i < out.size(); ++i) x.grad()[i] += factor * out.grad()[i];
    });
  }
  return out;
}

// x[rows×n] + bias[n] broadcast over rows.
template <typename S>
Tensor<S> add_bias(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& bias) {
  if (bias.size() != x.cols())
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match columns of " +
                         shape_string(x.shape()));
  const bool g = tape.wants_grad(x, bias);
  auto out = detail::make_output(tape, x.shape(), g);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  kernels::add_bias_rows(out.ptr(), bias.ptr(), x.rows(), x.cols());
  if (g) {
    tape.record([x, bias, out]() mutable {
      const std::size_t rows = out.rows(), cols = out.cols();
      if (x.requires_grad())
        for (std::size_t i = 0; i < out.size(); ++i) x.grad()[i] += out.grad()[i];
      if (bias.requires_grad())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) bias.grad()[c] += out.grad()[r * cols + c];
    });
  }
  return out;
}

// x · w + b
template <typename S>
Tensor<S> linear(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_bias(tape, matmul(tape, x, w), b);
}

template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x) {
  const bool g = tape.wants_grad(x);
  auto out = detail::make_output(tape, x.shape(), g);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
  if (g) {
    tape.record([x, out]() mutable {
      for (std::size_t i = 0; i < out.size(); ++i)
        if (x[i] > S(0)) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

// Softmax along `axis` (negative counts from the end). NaN inputs propagate.
template <typename S>
Tensor<S> softmax(Tape<S>& tape, const Tensor<S>& x, int axis = -1) {
  const int rank = static_cast<int>(x.shape().size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw DimensionError("softmax: axis out of range for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.shape()[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  const bool g = tape.wants_grad(x);
  auto out = detail::make_output(tape, x.shape(), g);
  std::vector<S> buf(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      for (std::size_t j = 0; j < n; ++j) buf[j] = x[base + j * inner];
      kernels::softmax_row(buf.data(), n);
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] = buf[j];
    }
  if (g) {
    tape.record([x, out, outer, inner, n]() mutable {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          S dot = S(0);
          for (std::size_t j = 0; j < n; ++j) dot += out.grad()[base + j * inner] * out[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            x.grad()[idx] += out[idx] * (out.grad()[idx] - dot);
          }
        }
    });
  }
  return out;
}

// Layer normalization over the last axis.
template <typename S>
Tensor<S> layer_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
  const std::size_t rows = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n)
    throw DimensionError("layer_norm: gain/bias must match last axis of " + shape_string(x.shape()));
  if (!(eps > S(0))) throw ContractError("layer_norm: eps must be positive");
  const bool g = tape.wants_grad(x, gain, bias);
  auto out = detail::make_output(tape, x.shape(), g);
  std::vector<S> means(rows), inv_stds(rows);
  for (std::size_t r = 0; r < rows; ++r)
    kernels::layer_norm_row(x.ptr() + r * n, gain.ptr(), bias.ptr(), eps, out.ptr() + r * n, n, &means[r],
                            &inv_stds[r]);
  if (g) {
    tape.record([x, gain, bias, out, means = std::move(means), inv_stds = std::move(inv_stds), rows,
                 n]() mutable {
      std::vector<S> xhat(n), dxhat(n);
      for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = x.ptr() + r * n;
        const S* dy = out.grad().data() + r * n;
        S sum_d = S(0), sum_dx = S(0);
        for (std::size_t j = 0; j < n; ++j) {
          xhat[j] = (xr[j] - means[r]) * inv_stds[r];
          dxhat[j] = dy[j] * gain[j];
          sum_d += dxhat[j];
          sum_dx += dxhat[j] * xhat[j];
        }
        if (gain.requires_grad())
          for (std::size_t j = 0; j < n; ++j) gain.grad()[j] += dy[j] * xhat[j];
        if (bias.requires_grad())
          for (std::size_t j = 0; j < n; ++j) bias.grad()[j] += dy[j];
        if (x.requires_grad()) {
          const S inv_n = S(1) / static_cast<S>(n);
          for (std::size_t j = 0; j < n; ++j)
            x.grad()[r * n + j] +=
                inv_stds[r] * inv_n * (static_cast<S>(n) * dxhat[j] - sum_d - xhat[j] * sum_dx);
        }
      }
    });
  }
  return out;
}

// Gathers rows of table[V×d] by id.
template <typename S>
Tensor<S> embedding(Tape<S>& tape, const Tensor<S>& table, std::span<const int> ids) {
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside [0," + std::to_string(vocab) + ")");
  const bool g = tape.wants_grad(table);
  auto out = detail::make_output(tape, Shape{ids.size(), d}, g);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  if (g) {
    tape.record([table, out, ids = std::vector<int>(ids.begin(), ids.end()), d]() mutable {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* dst = table.grad_ptr() + static_cast<std::size_t>(ids[i]) * d;
        const S* src = out.grad().data() + i * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

// Inverted dropout: kept units are scaled by 1/(1-rate) at training time.
// Identity when the tape is not in training mode or rate is 0.
template <typename S>
Tensor<S> dropout(Tape<S>& tape, const Tensor<S>& x, double rate, std::uint64_t site) {
  if (!tape.training() || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  auto rng = tape.stream(site);
  const S keep_scale = S(1) / static_cast<S>(1.0 - rate);
  std::vector<S> mask(x.size());
  for (auto& m : mask) m = rng.uniform() >= rate ? keep_scale : S(0);
  const bool g = tape.wants_grad(x);
  auto out = detail::make_output(tape, x.shape(), g);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  if (g) {
    tape.record([x, out, mask = std::move(mask)]() mutable {
      for (std::size_t i = 0; i < out.size(); ++i) x.grad()[i] += out.grad()[i] * mask[i];
    });
  }
  return out;
}

// Which key positions each query row may attend to, for a padded batch laid
// out as `batch` blocks of `q_len` (queries) and `k_len` (keys) rows.
class AttentionMask {
 public:
  // Keys j < key_lengths[b].
  static AttentionMask padding(std::size_t q_len, std::size_t k_len, std::vector<std::size_t> key_lengths) {
    return AttentionMask(q_len, k_len, std::move(key_lengths), false, {});
  }
  // Keys j < key_lengths[b] and j <= i.
  static AttentionMask causal(std::size_t q_len, std::size_t k_len, std::vector<std::size_t> key_lengths) {
    return AttentionMask(q_len, k_len, std::move(key_lengths), true, {});
  }
  // allowed[(b*q_len + i)*k_len + j] != 0 marks permitted keys.
  static AttentionMask dense(std::size_t batch, std::size_t q_len, std::size_t k_len,
                             std::vector<std::uint8_t> allowed) {
    if (allowed.size() != batch * q_len * k_len) throw DimensionError("dense attention mask has wrong size");
    return AttentionMask(q_len, k_len, std::vector<std::size_t>(batch, k_len), false, std::move(allowed));
  }

  std::size_t batch() const { return key_lengths_.size(); }
  std::size_t q_len() const { return q_len_; }
  std::size_t k_len() const { return k_len_; }

  bool allowed(std::size_t b, std::size_t i, std::size_t j) const {
    if (!dense_.empty()) return dense_[(b * q_len_ + i) * k_len_ + j] != 0;
    return j < key_lengths_[b] && (!causal_ || j <= i);
  }

 private:
  AttentionMask(std::size_t q_len, std::size_t k_len, std::vector<std::size_t> key_lengths, bool causal,
                std::vector<std::uint8_t> dense)
      : q_len_(q_len), k_len_(k_len), key_lengths_(std::move(key_lengths)), causal_(causal),
        dense_(std::move(dense)) {}

  std::size_t q_len_, k_len_;
  std::vector<std::size_t> key_lengths_;
  bool causal_;
  std::vector<std::uint8_t> dense_;
};

// Multi-head scaled dot-product attention over already-projected inputs.
// q: [batch*q_len × d], k/v: [batch*k_len × d]; heads split the d columns.
template <typename S>
Tensor<S> attention(Tape<S>& tape, const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    const AttentionMask& mask, std::size_t heads) {
  const std::size_t batch = mask.batch(), lq = mask.q_len(), lk = mask.k_len();
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (q.rows() != batch * lq || k.rows() != batch * lk || v.rows() != batch * lk || k.cols() != d ||
      v.cols() != d)
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()) + " inconsistent with mask geometry");
  const std::size_t dh = d / heads;
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(dh));
  const bool g = tape.wants_grad(q, k, v);
  auto out = detail::make_output(tape, q.shape(), g);
  std::vector<S> probs(batch * heads * lq * lk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < lq; ++i) {
        const S* qrow = q.ptr() + (b * lq + i) * d + h * dh;
        const S* kbase = k.ptr() + b * lk * d + h * dh;
        const S* vbase = v.ptr() + b * lk * d + h * dh;
        S* p = probs.data() + ((b * heads + h) * lq + i) * lk;
        kernels::attend_row(qrow, kbase, vbase, d, lk, dh, scale_factor,
                            [&](std::size_t j) { return mask.allowed(b, i, j); }, p,
                            out.ptr() + (b * lq + i) * d + h * dh);
      }
  if (g) {
    tape.record([q, k, v, out, probs = std::move(probs), batch, heads, lq, lk, d, dh, scale_factor]() mutable {
      std::vector<S> dp(lk);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < lq; ++i) {
            const S* p = probs.data() + ((b * heads + h) * lq + i) * lk;
            const S* dout = out.grad().data() + (b * lq + i) * d + h * dh;
            S dot = S(0);
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == S(0)) {
                dp[j] = S(0);
                continue;
              }
              const S* vrow = v.ptr() + (b * lk + j) * d + h * dh;
              S s = S(0);
              for (std::size_t c = 0; c < dh; ++c) s += dout[c] * vrow[c];
              dp[j] = s;
              dot += p[j] * s;
            }
            const S* qrow = q.ptr() + (b * lq + i) * d + h * dh;
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == S(0)) continue;
              const S ds = p[j] * (dp[j] - dot) * scale_factor;
              const std::size_t krow = (b * lk + j) * d + h * dh;
              if (q.requires_grad()) {
                S* dq = q.grad_ptr() + (b * lq + i) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dq[c] += ds * k[krow + c];
              }
              if (k.requires_grad())
                for (std::size_t c = 0; c < dh; ++c) k.grad()[krow + c] += ds * qrow[c];
              if (v.requires_grad())
                for (std::size_t c = 0; c < dh; ++c) v.grad()[krow + c] += p[j] * dout[c];
            }
          }
    });
  }
  return out;
}

// Sum over masked rows of -log softmax(logits)[target], fused via log-sum-exp.
// With label_smoothing > 0 the target distribution is (1-ε)·onehot + ε/V.
template <typename S>
Tensor<S> cross_entropy_from_logits(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> mask, double label_smoothing = 0.0) {
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n || mask.size() != n)
    throw LengthError("cross_entropy: " + std::to_string(n) + " logit rows but " +
                      std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                      " mask entries");
  for (std::size_t i = 0; i < n; ++i)
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                       " outside [0," + std::to_string(vocab) + ")");
  const S eps = static_cast<S>(label_smoothing);
  const bool g = tape.wants_grad(logits);
  auto out = detail::make_output(tape, Shape{1}, g);
  std::vector<S> lse(n, S(0));
  S total = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const S* row = logits.ptr() + i * vocab;
    lse[i] = kernels::log_sum_exp(row, vocab);
    S loss = lse[i] - row[targets[i]];
    if (eps > S(0)) {
      S mean_nll = S(0);
      for (std::size_t c = 0; c < vocab; ++c) mean_nll += lse[i] - row[c];
      loss = (S(1) - eps) * loss + eps * mean_nll / static_cast<S>(vocab);
    }
    total += loss;
  }
  out[0] = total;
  if (g) {
    tape.record([logits, out, lse = std::move(lse), t = std::vector<int>(targets.begin(), targets.end()),
                 m = std::vector<std::uint8_t>(mask.begin(), mask.end()), n, vocab, eps]() mutable {
      const S up = out.grad()[0];
      for (std::size_t i = 0; i < n; ++i) {
        if (!m[i]) continue;
        const S* row = logits.ptr() + i * vocab;
        S* dst = logits.grad_ptr() + i * vocab;
        for (std::size_t c = 0; c < vocab; ++c) {
          S target_mass = eps / static_cast<S>(vocab);
          if (static_cast<int>(c) == t[i]) target_mass += S(1) - eps;
          dst[c] += up * (std::exp(row[c] - lse[i]) - target_mass);
        }
      }
    });
  }
  return out;
}

}  // namespace tsnmt
