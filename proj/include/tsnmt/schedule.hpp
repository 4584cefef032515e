#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/kernels.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/random.hpp"

namespace tsnmt {

// Keep-probability schedule for mixing ground truth with model predictions.
//   p(s) = 1                                    for s <= alpha
//   p(s) = max(beta, mu / (mu + exp((s - alpha) / mu)))   otherwise
struct SampleSchedule {
  double alpha = 30000.0;  // last step of pure teacher forcing
  double beta = 0.85;      // floor of p(s)
  double mu = 5000.0;      // decay temperature

  void validate() const {
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("schedule.beta must lie in (0,1]");
    if (!(alpha >= 0.0)) throw ConfigError("schedule.alpha must be >= 0");
    if (!(mu > 0.0)) throw ConfigError("schedule.mu must be > 0");
  }
};

inline double keep_probability(double step, const SampleSchedule& sched) {
  if (step <= sched.alpha) return 1.0;
  return std::max(sched.beta, sched.mu / (sched.mu + std::exp((step - sched.alpha) / sched.mu)));
}

enum class FirstPassMode { sample, argmax };

inline FirstPassMode parse_first_pass_mode(const std::string& s) {
  if (s == "sample") return FirstPassMode::sample;
  if (s == "argmax") return FirstPassMode::argmax;
  throw ConfigError("unknown first-pass mode '" + s + "' (expected sample or argmax)");
}

inline std::string to_string(FirstPassMode m) { return m == FirstPassMode::sample ? "sample" : "argmax"; }

// Ground truth, first-pass predictions and their per-position mixture.
struct MixedTarget {
  std::vector<int> y;
  std::vector<int> y_prime;
  std::vector<int> tilde_y;
  std::vector<std::uint8_t> corruption_mask;  // tilde_y[t] != y[t]
};

// Independent Bernoulli(p) keep decisions per position. Begin-of-sequence and
// padding positions of y are never replaced. A draw is consumed for every
// position so the stream stays aligned regardless of content.
inline MixedTarget mix_targets(std::span<const int> y, std::span<const int> y_prime, double p, Rng& rng) {
  if (y.size() != y_prime.size())
    throw LengthError("mix_targets: y has " + std::to_string(y.size()) + " positions but y' has " +
                      std::to_string(y_prime.size()));
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("mix_targets: keep probability must lie in [0,1]");
  MixedTarget m;
  m.y.assign(y.begin(), y.end());
  m.y_prime.assign(y_prime.begin(), y_prime.end());
  m.tilde_y.resize(y.size());
  m.corruption_mask.resize(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) {
    const bool keep = rng.bernoulli(p);
    const bool protected_pos = y[t] == kBosId || y[t] == kPadId;
    m.tilde_y[t] = (keep || protected_pos) ? y[t] : y_prime[t];
    m.corruption_mask[t] = m.tilde_y[t] != y[t] ? 1 : 0;
  }
  return m;
}

// Picks a token from one row of logits. Padding and begin-of-sequence are
// never proposed.
template <typename S>
int choose_token(std::span<const S> logits, FirstPassMode mode, Rng& rng) {
  if (mode == FirstPassMode::argmax) {
    int best = -1;
    for (std::size_t v = 0; v < logits.size(); ++v) {
      if (static_cast<int>(v) == kPadId || static_cast<int>(v) == kBosId) continue;
      if (best < 0 || logits[v] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
    }
    return best;
  }
  std::vector<double> probs(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < logits.size(); ++v)
    if (static_cast<int>(v) != kPadId && static_cast<int>(v) != kBosId) mx = std::max(mx, static_cast<double>(logits[v]));
  for (std::size_t v = 0; v < logits.size(); ++v)
    probs[v] = (static_cast<int>(v) == kPadId || static_cast<int>(v) == kBosId)
                   ? 0.0
                   : std::exp(static_cast<double>(logits[v]) - mx);
  return static_cast<int>(rng.categorical(probs));
}

// Teacher-forced query-stream predictions y' for every decoder input
// position, computed without recording a tape (no gradient flows through y').
// Result is laid out like z.ids: position 0 of each row is begin-of-sequence,
// position t >= 1 is drawn from P(y_t | y_{<t}, x), and padding stays padding.
template <typename S>
std::vector<int> first_pass_predictions(const TransformerParams<S>& params, const TokenBatch& source,
                                        const TokenBatch& z, Rng& rng, FirstPassMode mode) {
  Tape<S> tape(0, false, false);
  auto enc = encode(tape, params, source);
  DecoderOptions opt;
  opt.content_logits = false;
  auto out = decoder_forward(tape, params, z, enc, opt);
  const std::size_t vocab = out.query_logits.cols();
  std::vector<int> y_prime(z.ids.size(), kPadId);
  for (std::size_t b = 0; b < z.batch; ++b) {
    y_prime[b * z.length] = kBosId;
    for (std::size_t t = 1; t < z.lengths[b]; ++t) {
      const S* row = out.query_logits.ptr() + (b * z.length + t - 1) * vocab;
      y_prime[b * z.length + t] = choose_token<S>(std::span<const S>(row, vocab), mode, rng);
    }
  }
  return y_prime;
}

}  // namespace tsnmt
