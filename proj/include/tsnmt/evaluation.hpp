#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/errors.hpp"

namespace tsnmt {

struct BleuReport {
  double bleu = 0.0;                      // 0..100
  std::array<double, 4> precisions{};     // p_1..p_4 in [0,1]
  std::array<std::uint64_t, 4> matches{};
  std::array<std::uint64_t, 4> totals{};
  double brevity_penalty = 1.0;
  std::uint64_t hyp_length = 0;
  std::uint64_t ref_length = 0;

  // The summary line printed by multi-bleu.perl.
  std::string summary() const {
    char buf[256];
    const double ratio = ref_length ? static_cast<double>(hyp_length) / static_cast<double>(ref_length) : 0.0;
    std::snprintf(buf, sizeof buf, "BLEU = %.2f, %.1f/%.1f/%.1f/%.1f (BP=%.3f, ratio=%.3f, hyp_len=%llu, ref_len=%llu)",
                  bleu, 100 * precisions[0], 100 * precisions[1], 100 * precisions[2], 100 * precisions[3],
                  brevity_penalty, ratio, static_cast<unsigned long long>(hyp_length),
                  static_cast<unsigned long long>(ref_length));
    return buf;
  }
};

namespace detail {

inline std::map<std::vector<std::string>, std::uint64_t> ngram_counts(const std::vector<std::string>& words,
                                                                      std::size_t n) {
  std::map<std::vector<std::string>, std::uint64_t> out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++out[std::vector<std::string>(words.begin() + i, words.begin() + i + n)];
  return out;
}

}  // namespace detail

// Corpus BLEU-4 with one reference per sentence, clipped counts, no
// smoothing and case-sensitive matching. A zero precision at any order gives
// BLEU 0.
inline BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                              const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size())
    throw LengthError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                      std::to_string(references.size()) + " references");
  BleuReport r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    r.hyp_length += hyp.size();
    r.ref_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = detail::ngram_counts(hyp, n);
      const auto rc = detail::ngram_counts(ref, n);
      for (const auto& [gram, count] : h) {
        r.totals[n - 1] += count;
        auto it = rc.find(gram);
        if (it != rc.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] ? static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]) : 0.0;
    if (r.precisions[n] == 0.0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  if (r.hyp_length == 0 || r.ref_length == 0) {
    r.brevity_penalty = r.hyp_length == 0 && r.ref_length > 0 ? 0.0 : 1.0;
    r.bleu = 0.0;
    return r;
  }
  if (r.hyp_length < r.ref_length)
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length));
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

// Fraction of positions with mask set where prediction equals reference.
// An empty mask selection yields 0.
inline double token_accuracy(const std::vector<int>& predictions, const std::vector<int>& references,
                             const std::vector<std::uint8_t>& mask) {
  if (predictions.size() != references.size() || mask.size() != references.size())
    throw LengthError("token_accuracy: prediction, reference and mask lengths differ");
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < references.size(); ++i)
    if (mask[i]) {
      ++total;
      hit += predictions[i] == references[i];
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// Overload without a mask: every non-pad reference position counts.
inline double token_accuracy(const std::vector<int>& predictions, const std::vector<int>& references) {
  std::vector<std::uint8_t> mask(references.size());
  for (std::size_t i = 0; i < references.size(); ++i) mask[i] = references[i] != kPadId;
  return token_accuracy(predictions, references, mask);
}

// Fraction of sentences reproduced exactly.
inline double sequence_accuracy(const std::vector<std::vector<std::string>>& hypotheses,
                                const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size()) throw LengthError("sequence_accuracy: corpus sizes differ");
  if (hypotheses.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) hit += hypotheses[i] == references[i];
  return static_cast<double>(hit) / static_cast<double>(hypotheses.size());
}

// One run of the content-stream correction diagnostic over a single target.
struct CorrectionResult {
  std::vector<int> reference;          // y_1..y_n
  std::vector<int> corrupted;          // input tokens fed to the content stream
  std::vector<int> predictions;        // argmax of content logits per position
  std::vector<std::size_t> positions;  // indices (into reference) that were corrupted
  std::size_t recovered = 0;
  double corruption_rate = 0.0;        // nominal rate used to inject the corruption

  bool vacuous() const { return positions.empty(); }
  // NaN when vacuous.
  double recovery_rate() const {
    return vacuous() ? std::nan("") : static_cast<double>(recovered) / static_cast<double>(positions.size());
  }
};

struct RecoveryBucket {
  double corruption_rate = 0.0;
  std::size_t runs = 0;
  std::size_t corrupted = 0;
  std::size_t recovered = 0;
  double rate() const { return corrupted ? static_cast<double>(recovered) / static_cast<double>(corrupted) : 0.0; }
};

struct RecoverySummary {
  std::size_t runs = 0;
  std::size_t vacuous_runs = 0;
  std::size_t corrupted = 0;
  std::size_t recovered = 0;
  std::vector<RecoveryBucket> buckets;  // ascending corruption rate

  // Pooled over all corrupted positions.
  double rate() const { return corrupted ? static_cast<double>(recovered) / static_cast<double>(corrupted) : 0.0; }
};

inline RecoverySummary recovery_rate(const std::vector<CorrectionResult>& runs) {
  if (runs.empty()) throw DataError("recovery_rate: no diagnostic runs");
  RecoverySummary s;
  std::map<double, RecoveryBucket> by_rate;
  for (const auto& r : runs) {
    ++s.runs;
    s.vacuous_runs += r.vacuous();
    s.corrupted += r.positions.size();
    s.recovered += r.recovered;
    auto& b = by_rate[r.corruption_rate];
    b.corruption_rate = r.corruption_rate;
    ++b.runs;
    b.corrupted += r.positions.size();
    b.recovered += r.recovered;
  }
  if (s.corrupted == 0) throw DataError("recovery_rate: no corrupted positions in any run (vacuous)");
  for (const auto& [rate, b] : by_rate) s.buckets.push_back(b);
  return s;
}

struct PairedRecovery {
  RecoverySummary a, b;
  std::size_t only_a = 0;  // positions recovered by a but not b
  std::size_t only_b = 0;
  double difference() const { return a.rate() - b.rate(); }
};

// Compares two models on identical corruptions; the runs must line up
// position for position.
inline PairedRecovery compare_recovery(const std::vector<CorrectionResult>& a, const std::vector<CorrectionResult>& b) {
  if (a.size() != b.size()) throw LengthError("compare_recovery: run counts differ");
  PairedRecovery out{recovery_rate(a), recovery_rate(b)};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].corrupted != b[i].corrupted || a[i].positions != b[i].positions)
      throw DataError("compare_recovery: run " + std::to_string(i) + " was not given identical corruptions");
    for (std::size_t pos : a[i].positions) {
      const bool ra = a[i].predictions[pos] == a[i].reference[pos];
      const bool rb = b[i].predictions[pos] == b[i].reference[pos];
      out.only_a += ra && !rb;
      out.only_b += rb && !ra;
    }
  }
  return out;
}

}  // namespace tsnmt
