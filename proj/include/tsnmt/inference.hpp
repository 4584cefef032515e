#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/evaluation.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/random.hpp"

namespace tsnmt {

enum class DecodeMode { greedy, beam };

struct DecodeConfig {
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t max_output_length = 128;
  DecodeMode mode = DecodeMode::beam;
  std::size_t nbest = 1;
  // Experimental: replace each emitted token by the content stream's argmax
  // before continuing. Off by default.
  bool substitute_corrections = false;

  static DecodeConfig iwslt() { return {}; }
  static DecodeConfig wmt() {
    DecodeConfig c;
    c.beam_size = 4;
    c.length_penalty = 0.6;
    return c;
  }

  void validate() const {
    if (beam_size < 1) throw ConfigError("decode.beam must be >= 1");
    if (max_output_length < 1) throw ConfigError("decode.max_len must be >= 1");
    if (!(length_penalty >= 0.0)) throw ConfigError("decode.length_penalty must be >= 0");
    if (nbest < 1 || nbest > beam_size) throw ConfigError("decode.nbest must lie in [1, beam]");
  }
};

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "greedy") return DecodeMode::greedy;
  if (s == "beam") return DecodeMode::beam;
  throw ConfigError("unknown decode mode '" + s + "' (expected greedy or beam)");
}

inline std::string to_string(DecodeMode m) { return m == DecodeMode::greedy ? "greedy" : "beam"; }

// ((5 + len) / 6)^alpha
inline double length_penalty(std::size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

// Candidate tokens exclude padding and begin-of-sequence.
inline bool is_candidate(int token) { return token != kPadId && token != kBosId; }

template <typename S>
int argmax_candidate(std::span<const S> logits) {
  int best = -1;
  for (std::size_t v = 0; v < logits.size(); ++v)
    if (is_candidate(static_cast<int>(v)) && (best < 0 || logits[v] > logits[static_cast<std::size_t>(best)]))
      best = static_cast<int>(v);
  return best;
}

template <typename S>
std::vector<double> log_softmax(std::span<const S> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (S x : logits) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (S x : logits) sum += std::exp(static_cast<double>(x) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t v = 0; v < logits.size(); ++v) out[v] = static_cast<double>(logits[v]) - lse;
  return out;
}

template <typename S>
std::size_t output_limit(const TransformerParams<S>& p, const DecodeConfig& cfg) {
  return std::min(cfg.max_output_length, p.config.max_positions);
}

template <typename S>
struct GreedyResult {
  std::vector<int> tokens;                 // emitted tokens, ending in eos unless the limit was hit
  std::vector<std::vector<S>> step_logits; // query-stream logits behind each emitted token
  double logprob = 0.0;
};

template <typename S>
GreedyResult<S> greedy_decode(const TransformerParams<S>& p, std::span<const int> source, const DecodeConfig& cfg = {}) {
  const std::size_t limit = output_limit(p, cfg);
  GreedyResult<S> r;
  IncrementalDecoder<S> dec(p, source);
  dec.push(kBosId);
  while (true) {
    auto logits = dec.next_logits();
    int tok = argmax_candidate<S>(logits);
    r.logprob += log_softmax<S>(logits)[static_cast<std::size_t>(tok)];
    r.step_logits.push_back(std::move(logits));
    r.tokens.push_back(tok);
    if (tok == kEosId || r.tokens.size() >= limit) break;
    dec.push(tok);
    if (cfg.substitute_corrections) {
      const int fixed = argmax_candidate<S>(dec.content_logits());
      if (fixed != tok && fixed != kEosId) {
        r.tokens.back() = fixed;
        IncrementalDecoder<S> rebuilt(p, source);
        rebuilt.push(kBosId);
        for (int t : r.tokens) rebuilt.push(t);
        dec = std::move(rebuilt);
      }
    }
  }
  return r;
}

// Greedy decoding that reruns the full-sequence decoder on the whole prefix
// at every step; the reference for the cached path.
template <typename S>
GreedyResult<S> greedy_decode_full_recompute(const TransformerParams<S>& p, std::span<const int> source,
                                             const DecodeConfig& cfg = {}) {
  const std::size_t limit = output_limit(p, cfg);
  GreedyResult<S> r;
  Tape<S> tape(0, false, false);
  const auto enc = encode(tape, p, TokenBatch::single(source));
  std::vector<int> z{kBosId};
  DecoderOptions opt;
  opt.content_logits = false;
  const std::size_t vocab = p.config.tgt_vocab_size;
  while (true) {
    const auto out = decoder_forward(tape, p, TokenBatch::single(z), enc, opt);
    const S* row = out.query_logits.ptr() + (z.size() - 1) * vocab;
    std::vector<S> logits(row, row + vocab);
    const int tok = argmax_candidate<S>(logits);
    r.logprob += log_softmax<S>(logits)[static_cast<std::size_t>(tok)];
    r.step_logits.push_back(std::move(logits));
    r.tokens.push_back(tok);
    if (tok == kEosId || r.tokens.size() >= limit) break;
    z.push_back(tok);
  }
  return r;
}

template <typename S>
struct DecodeHypothesis {
  std::vector<int> tokens;  // generated tokens (finished ones end in eos unless cut at the limit)
  double logprob = 0.0;
  double score = 0.0;       // logprob / lp(len)
  bool finished = false;
  IncrementalDecoder<S> state;
};

struct ScoredSequence {
  std::vector<int> tokens;
  double logprob = 0.0;
  double score = 0.0;
};

// Beam search over query-stream distributions.
//
// Each step expands every active hypothesis by all candidate tokens and ranks
// the expansions by cumulative log-probability (ties: parent order, then
// token id). Walking the top 2·beam expansions in order, an end-of-sequence
// expansion ranked within the first `beam` is retired as finished, and other
// expansions refill the active set up to `beam`. Expansions reaching the
// output limit are retired as finished. The search ends when `beam`
// hypotheses have finished, no hypothesis is active, or no active hypothesis
// can still beat the best finished normalized score (for logprob L <= 0 the
// best reachable normalized score is L / lp(limit)).
// Returns finished hypotheses by normalized score, best first.
template <typename S>
std::vector<ScoredSequence> beam_search(const TransformerParams<S>& p, std::span<const int> source,
                                        const DecodeConfig& cfg = {}) {
  cfg.validate();
  const std::size_t beam = cfg.beam_size;
  const std::size_t limit = output_limit(p, cfg);
  const double lp_limit = length_penalty(limit, cfg.length_penalty);

  std::vector<DecodeHypothesis<S>> active;
  {
    IncrementalDecoder<S> dec(p, source);
    dec.push(kBosId);
    active.push_back({{}, 0.0, 0.0, false, std::move(dec)});
  }
  std::vector<ScoredSequence> finished;
  double best_finished = -std::numeric_limits<double>::infinity();

  struct Expansion {
    std::size_t parent;
    int token;
    double logprob;
  };

  for (std::size_t step = 1; step <= limit && !active.empty(); ++step) {
    std::vector<Expansion> cand;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const auto lp = log_softmax<S>(active[h].state.next_logits());
      for (std::size_t v = 0; v < lp.size(); ++v)
        if (is_candidate(static_cast<int>(v))) cand.push_back({h, static_cast<int>(v), active[h].logprob + lp[v]});
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Expansion& a, const Expansion& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    const bool last = step == limit;
    std::vector<DecodeHypothesis<S>> next;
    const std::size_t window = std::min(cand.size(), 2 * beam);
    for (std::size_t rank = 0; rank < window; ++rank) {
      const auto& e = cand[rank];
      if (e.token == kEosId || last) {
        if (rank < beam) {
          ScoredSequence s{active[e.parent].tokens, e.logprob, 0.0};
          s.tokens.push_back(e.token);
          s.score = e.logprob / length_penalty(s.tokens.size(), cfg.length_penalty);
          best_finished = std::max(best_finished, s.score);
          finished.push_back(std::move(s));
        }
        continue;
      }
      if (next.size() >= beam) continue;
      DecodeHypothesis<S> h{active[e.parent].tokens, e.logprob, 0.0, false, active[e.parent].state};
      h.tokens.push_back(e.token);
      h.score = h.logprob / length_penalty(h.tokens.size(), cfg.length_penalty);
      h.state.push(e.token);
      next.push_back(std::move(h));
    }
    active = std::move(next);
    if (finished.size() >= beam) break;
    double best_active_bound = -std::numeric_limits<double>::infinity();
    for (const auto& h : active) best_active_bound = std::max(best_active_bound, h.logprob / lp_limit);
    if (!finished.empty() && best_active_bound <= best_finished) break;
  }
  std::stable_sort(finished.begin(), finished.end(), [](const ScoredSequence& a, const ScoredSequence& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  if (finished.size() > cfg.nbest) finished.resize(cfg.nbest);
  return finished;
}

// Decodes per cfg.mode; returns the emitted tokens without the trailing eos.
template <typename S>
std::vector<int> translate_ids(const TransformerParams<S>& p, std::span<const int> source, const DecodeConfig& cfg) {
  std::vector<int> toks;
  if (cfg.mode == DecodeMode::greedy) toks = greedy_decode(p, source, cfg).tokens;
  else toks = beam_search(p, source, cfg).front().tokens;
  if (!toks.empty() && toks.back() == kEosId) toks.pop_back();
  return toks;
}

// Replaces each position of y independently with probability `rate` by a
// uniformly drawn regular token different from the original. One uniform is
// consumed per position, plus one more per replaced position.
inline std::vector<int> corrupt_target(std::span<const int> y, double rate, std::size_t vocab_size, Rng& rng) {
  if (vocab_size < kNumReserved + 2) throw ConfigError("corrupt_target needs at least two regular tokens");
  std::vector<int> out(y.begin(), y.end());
  const std::uint64_t regular = vocab_size - kNumReserved;
  for (auto& t : out) {
    if (!rng.bernoulli(rate)) continue;
    int r = static_cast<int>(kNumReserved + rng.below(regular - 1));
    if (t >= static_cast<int>(kNumReserved) && r >= t) ++r;
    t = r;
  }
  return out;
}

// Runs the content stream over [bos, corrupted...] and reports which
// corrupted positions it re-predicts as the reference token. Read-only.
template <typename S>
CorrectionResult correction_diagnostic(const TransformerParams<S>& p, std::span<const int> source,
                                       std::span<const int> reference, std::span<const int> corrupted) {
  if (p.config.decoder_mode != DecoderMode::two_stream)
    throw ContractError("correction diagnostics need the two-stream decoder");
  if (reference.size() != corrupted.size())
    throw LengthError("correction_diagnostic: reference has " + std::to_string(reference.size()) +
                      " tokens, corrupted input has " + std::to_string(corrupted.size()));
  CorrectionResult r;
  r.reference.assign(reference.begin(), reference.end());
  r.corrupted.assign(corrupted.begin(), corrupted.end());
  std::vector<int> z{kBosId};
  z.insert(z.end(), corrupted.begin(), corrupted.end());
  Tape<S> tape(0, false, false);
  const auto enc = encode(tape, p, TokenBatch::single(source));
  const auto out = decoder_forward(tape, p, TokenBatch::single(z), enc);
  const std::size_t vocab = p.config.tgt_vocab_size;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const S* row = out.content_logits.ptr() + (i + 1) * vocab;
    r.predictions.push_back(argmax_candidate<S>(std::span<const S>(row, vocab)));
    if (corrupted[i] != reference[i]) {
      r.positions.push_back(i);
      r.recovered += r.predictions.back() == reference[i];
    }
  }
  return r;
}

}  // namespace tsnmt
