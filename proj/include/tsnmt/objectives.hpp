#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "tsnmt/errors.hpp"
#include "tsnmt/ops.hpp"
#include "tsnmt/tensor.hpp"

namespace tsnmt {

struct LossWeights {
  double lambda = 1.0;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  }
};

struct LossBreakdown {
  double nll = 0.0;
  double ecm = 0.0;
  double combined = 0.0;  // nll + lambda * ecm
  std::size_t nll_tokens = 0;
  std::size_t ecm_tokens = 0;
};

// -Σ_t log P(y_t | ỹ_{<t}, x) over non-pad target positions, from query-stream logits.
template <typename S>
Tensor<S> nll_loss(Tape<S>& tape, const Tensor<S>& query_logits, std::span<const int> targets,
                   std::span<const std::uint8_t> target_mask, double label_smoothing = 0.0) {
  if (targets.size() != query_logits.rows() || target_mask.size() != query_logits.rows())
    throw LengthError("nll_loss: " + std::to_string(query_logits.rows()) + " logit rows, " +
                      std::to_string(targets.size()) + " targets, " + std::to_string(target_mask.size()) + " mask entries");
  return cross_entropy_from_logits(tape, query_logits, targets, target_mask, label_smoothing);
}

// -Σ_t 1(ỹ_t ≠ y_t) log P(y_t | ỹ_{≤t}, x), from content-stream logits.
// `clean` holds the uncorrupted decoder input y aligned with content rows.
template <typename S>
Tensor<S> ecm_loss(Tape<S>& tape, const Tensor<S>& content_logits, std::span<const int> clean,
                   std::span<const std::uint8_t> corruption_mask, double label_smoothing = 0.0) {
  if (corruption_mask.size() != content_logits.rows() || clean.size() != content_logits.rows())
    throw LengthError("ecm_loss: " + std::to_string(content_logits.rows()) + " logit rows, " +
                      std::to_string(clean.size()) + " tokens, " + std::to_string(corruption_mask.size()) +
                      " mask entries");
  return cross_entropy_from_logits(tape, content_logits, clean, corruption_mask, label_smoothing);
}

// Validates and combines scalar loss values. `step` is only used for the
// divergence diagnostic.
inline LossBreakdown combined_loss(double nll, double ecm, const LossWeights& w, std::uint64_t step = 0) {
  if (!std::isfinite(nll) || !std::isfinite(ecm))
    throw DivergenceError("non-finite loss at step " + std::to_string(step) + ": nll=" + std::to_string(nll) +
                          " ecm=" + std::to_string(ecm));
  LossBreakdown b;
  b.nll = nll;
  b.ecm = ecm;
  b.combined = nll + w.lambda * ecm;
  return b;
}

}  // namespace tsnmt
