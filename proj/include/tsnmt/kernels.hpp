#pragma once

// Dense numeric kernels shared by the taped ops and the incremental decoder.
//
// Every output element is accumulated sequentially in ascending index order
// and the project builds with -ffp-contract=off, so a row computed alone is
// bit-identical to the same row computed inside a larger matrix. The
// incremental decoder relies on this to reproduce full-sequence logits exactly.

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "tsnmt/errors.hpp"

namespace tsnmt::kernels {

// c[m×n] = a[m×k] · b[k×n]
template <typename S>
void gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = S(0);
    const S* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×n] += a[m×k] · b[k×n]
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    const S* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
std::vector<S> transpose(const S* a, std::size_t rows, std::size_t cols) {
  std::vector<S> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

template <typename S>
void add_bias_rows(S* x, const S* bias, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    S* row = x + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += bias[j];
  }
}

// In-place softmax of one row; returns nothing, writes probabilities.
template <typename S>
void softmax_row(S* x, std::size_t n) {
  S mx = -std::numeric_limits<S>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
  S sum = S(0);
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  for (std::size_t j = 0; j < n; ++j) x[j] /= sum;
}

// log(sum(exp(x))) with max subtraction.
template <typename S>
S log_sum_exp(const S* x, std::size_t n) {
  S mx = -std::numeric_limits<S>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
  S sum = S(0);
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  return mx + std::log(sum);
}

// y = (x - mean) / sqrt(var + eps) * gain + bias over one row.
// mean_out / inv_std_out receive the statistics needed for backward.
template <typename S>
void layer_norm_row(const S* x, const S* gain, const S* bias, S eps, S* y, std::size_t n,
                    S* mean_out = nullptr, S* inv_std_out = nullptr) {
  S sum = S(0);
  for (std::size_t j = 0; j < n; ++j) sum += x[j];
  const S mean = sum / static_cast<S>(n);
  S sq = S(0);
  for (std::size_t j = 0; j < n; ++j) {
    const S c = x[j] - mean;
    sq += c * c;
  }
  const S var = sq / static_cast<S>(n);
  const S inv_std = S(1) / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) y[j] = (x[j] - mean) * inv_std * gain[j] + bias[j];
  if (mean_out) *mean_out = mean;
  if (inv_std_out) *inv_std_out = inv_std;
}

// Scaled dot-product attention for a single query row of one head.
//
// keys/values point at row 0 of the head's slice; consecutive rows are
// `stride` elements apart. `allowed(j)` selects permitted keys among
// [0, nkeys). probs receives the attention distribution (0 for masked keys).
// Throws ContractError when no key is permitted.
template <typename S, typename Allowed>
void attend_row(const S* q, const S* keys, const S* values, std::size_t stride,
                std::size_t nkeys, std::size_t head_dim, S scale, Allowed&& allowed, S* probs,
                S* out) {
  S mx = -std::numeric_limits<S>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < nkeys; ++j) {
    if (!allowed(j)) {
      probs[j] = S(0);
      continue;
    }
    const S* k = keys + j * stride;
    S s = S(0);
    for (std::size_t c = 0; c < head_dim; ++c) s += q[c] * k[c];
    s = s * scale;
    probs[j] = s;
    mx = (!any || s > mx) ? s : mx;
    any = true;
  }
  if (!any) throw ContractError("attention row has no permitted key positions");
  S sum = S(0);
  for (std::size_t j = 0; j < nkeys; ++j) {
    if (!allowed(j)) continue;
    probs[j] = std::exp(probs[j] - mx);
    sum += probs[j];
  }
  for (std::size_t c = 0; c < head_dim; ++c) out[c] = S(0);
  for (std::size_t j = 0; j < nkeys; ++j) {
    if (!allowed(j)) continue;
    probs[j] /= sum;
    const S p = probs[j];
    const S* v = values + j * stride;
    for (std::size_t c = 0; c < head_dim; ++c) out[c] += p * v[c];
  }
}

}  // namespace tsnmt::kernels
