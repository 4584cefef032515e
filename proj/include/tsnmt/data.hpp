#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/random.hpp"

namespace tsnmt {

using TokenizedText = std::vector<std::vector<std::string>>;

inline std::vector<std::string> split_whitespace(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(std::move(tok));
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

// Token <-> id bijection with ids 0..3 reserved for pad, bos, eos, unk.
class Vocabulary {
 public:
  static constexpr const char* kReserved[kNumReserved] = {"<pad>", "<s>", "</s>", "<unk>"};

  Vocabulary() {
    for (std::size_t i = 0; i < kNumReserved; ++i) add(kReserved[i]);
  }

  // Frequency-ranked, ties broken lexicographically. max_size bounds the total
  // size including reserved ids (0 = unbounded); tokens seen fewer than
  // min_count times map to unk.
  static Vocabulary build(const TokenizedText& corpus, std::size_t max_size = 0, std::size_t min_count = 1) {
    std::unordered_map<std::string, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& line : corpus)
      for (const auto& tok : line) {
        ++counts[tok];
        ++total;
      }
    if (total == 0) throw DataError("cannot build a vocabulary from an empty corpus");
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
      if (n < min_count) break;
      if (max_size && v.size() >= max_size) break;
      if (v.index_.count(tok)) continue;  // a literal reserved symbol in the text
      v.add(tok);
    }
    if (v.size() <= kNumReserved) throw DataError("vocabulary would contain no regular tokens");
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& regular) {
    Vocabulary v;
    for (const auto& t : regular) {
      if (v.index_.count(t)) throw DataError("duplicate vocabulary entry '" + t + "'");
      v.add(t);
    }
    if (v.size() <= kNumReserved) throw DataError("vocabulary would contain no regular tokens");
    return v;
  }

  // One regular token per line; line k (0-based) is id k + 4.
  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary file " + path);
    std::vector<std::string> toks;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      toks.push_back(line);
    }
    return from_tokens(toks);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary file " + path);
    for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
    if (!out) throw DataError("failed writing vocabulary file " + path);
  }

  std::size_t size() const { return tokens_.size(); }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(id(t));
    return ids;
  }

  // Drops pad/bos and stops at eos.
  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (int i : ids) {
      if (i == kEosId) break;
      if (i == kPadId || i == kBosId) continue;
      out.push_back(token(i));
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<std::string> regular_tokens() const { return {tokens_.begin() + kNumReserved, tokens_.end()}; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add(const std::string& tok) {
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct SentencePair {
  std::vector<int> x;  // source ids
  std::vector<int> y;  // target ids without bos/eos
};

struct ParallelText {
  TokenizedText source;
  TokenizedText target;
};

inline TokenizedText read_tokenized(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus file " + path);
  TokenizedText out;
  for (std::string line; std::getline(in, line);) out.push_back(split_whitespace(line));
  return out;
}

inline void write_tokenized(const std::string& path, const TokenizedText& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& line : text) out << join_tokens(line) << '\n';
  if (!out) throw DataError("failed writing " + path);
}

inline ParallelText read_parallel(const std::string& src_path, const std::string& tgt_path) {
  ParallelText p{read_tokenized(src_path), read_tokenized(tgt_path)};
  if (p.source.size() != p.target.size())
    throw DataError("parallel corpus line counts differ: " + src_path + " has " + std::to_string(p.source.size()) +
                    ", " + tgt_path + " has " + std::to_string(p.target.size()));
  for (std::size_t i = 0; i < p.source.size(); ++i)
    if (p.source[i].empty() || p.target[i].empty())
      throw DataError("empty sentence at line " + std::to_string(i + 1) + " of the parallel corpus");
  return p;
}

inline std::vector<SentencePair> encode_pairs(const ParallelText& text, const Vocabulary& src_vocab,
                                              const Vocabulary& tgt_vocab) {
  std::vector<SentencePair> pairs;
  pairs.reserve(text.source.size());
  for (std::size_t i = 0; i < text.source.size(); ++i) {
    if (text.source[i].empty() || text.target[i].empty())
      throw DataError("empty sentence at line " + std::to_string(i + 1));
    pairs.push_back({src_vocab.encode(text.source[i]), tgt_vocab.encode(text.target[i])});
  }
  return pairs;
}

enum class SyntheticTask { lexicon, reversal, noisy_lexicon };

inline SyntheticTask parse_synthetic_task(const std::string& s) {
  if (s == "lexicon") return SyntheticTask::lexicon;
  if (s == "reversal") return SyntheticTask::reversal;
  if (s == "noisy_lexicon") return SyntheticTask::noisy_lexicon;
  throw ConfigError("unknown synthetic task '" + s + "' (expected lexicon, reversal or noisy_lexicon)");
}

struct SyntheticSpec {
  SyntheticTask kind = SyntheticTask::lexicon;
  std::size_t vocab_size = 50;  // distinct words per side
  std::size_t max_len = 12;
  std::size_t num_pairs = 10000;
  std::uint64_t seed = 1;
  double noise = 0.2;           // noisy_lexicon only
  std::size_t successors = 3;   // fan-out of the sentence generator
};

// Synthetic translation tasks.
//
// Source sentences are walks over a seeded successor graph: the first word is
// uniform, each following word is one of `successors` fixed successors of the
// previous word, and the length is uniform in [1, max_len]. Source word s<i>
// translates to target word t<π(i)> for a seeded permutation π.
//   lexicon        target = word-by-word translation
//   reversal       lexicon translation, reversed
//   noisy_lexicon  the lexicon target of the clean source, paired with a
//                  source in which each word is independently replaced, with
//                  probability `noise`, by a uniformly drawn word (possibly
//                  itself). Corrupted words can only be recovered from
//                  context through the successor structure.
// Noise draws come from a separate stream, so noise = 0 reproduces lexicon.
inline ParallelText generate_synthetic_task(const SyntheticSpec& spec) {
  if (spec.vocab_size < 5) throw ConfigError("synthetic vocab_size must be >= 5");
  if (spec.max_len < 1) throw ConfigError("synthetic max_len must be >= 1");
  if (spec.kind == SyntheticTask::noisy_lexicon && !(spec.noise >= 0.0 && spec.noise <= 1.0))
    throw ConfigError("synthetic noise must lie in [0,1]");
  const std::size_t v = spec.vocab_size;
  Rng rng(spec.seed);
  std::vector<std::size_t> perm(v);
  for (std::size_t i = 0; i < v; ++i) perm[i] = i;
  rng.shuffle(perm);
  const std::size_t fan = std::max<std::size_t>(1, spec.successors);
  std::vector<std::vector<std::size_t>> next(v);
  for (auto& s : next)
    for (std::size_t k = 0; k < fan; ++k) s.push_back(static_cast<std::size_t>(rng.below(v)));

  Rng noise_rng(mix_seed(spec.seed, 0x6e6f697365ULL));
  ParallelText out;
  out.source.reserve(spec.num_pairs);
  out.target.reserve(spec.num_pairs);
  for (std::size_t n = 0; n < spec.num_pairs; ++n) {
    const std::size_t len = 1 + static_cast<std::size_t>(rng.below(spec.max_len));
    std::vector<std::size_t> words(len);
    words[0] = static_cast<std::size_t>(rng.below(v));
    for (std::size_t i = 1; i < len; ++i) words[i] = next[words[i - 1]][rng.below(fan)];
    std::vector<std::string> src, tgt;
    for (std::size_t w : words) {
      src.push_back("s" + std::to_string(w));
      tgt.push_back("t" + std::to_string(perm[w]));
    }
    if (spec.kind == SyntheticTask::reversal) std::reverse(tgt.begin(), tgt.end());
    if (spec.kind == SyntheticTask::noisy_lexicon)
      for (auto& s : src)
        if (noise_rng.bernoulli(spec.noise)) s = "s" + std::to_string(noise_rng.below(v));
    out.source.push_back(std::move(src));
    out.target.push_back(std::move(tgt));
  }
  return out;
}

// A padded training batch.
//   decoder_input  [bos, y_1 .. y_m]        (content stream / clean ỹ)
//   targets        [y_1 .. y_m, eos]        (query stream targets)
//   target_mask    1 at the m+1 real target positions
struct Batch {
  TokenBatch source;
  TokenBatch decoder_input;
  std::vector<int> targets;
  std::vector<std::uint8_t> target_mask;
  std::vector<std::size_t> pair_indices;
  std::size_t src_tokens = 0;  // real tokens, no bos/eos
  std::size_t tgt_tokens = 0;

  std::size_t size() const { return pair_indices.size(); }
};

inline std::size_t pair_tokens(const SentencePair& p) { return p.x.size() + p.y.size(); }

inline Batch make_batch(const std::vector<SentencePair>& pairs, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("cannot build an empty batch");
  Batch b;
  b.pair_indices = indices;
  std::vector<std::vector<int>> src, dec;
  for (std::size_t i : indices) {
    const auto& p = pairs.at(i);
    if (p.x.empty() || p.y.empty()) throw DataError("empty sentence in pair " + std::to_string(i + 1));
    src.push_back(p.x);
    std::vector<int> z{kBosId};
    z.insert(z.end(), p.y.begin(), p.y.end());
    dec.push_back(std::move(z));
    b.src_tokens += p.x.size();
    b.tgt_tokens += p.y.size();
  }
  b.source = TokenBatch::from_sequences(src);
  b.decoder_input = TokenBatch::from_sequences(dec);
  const std::size_t len = b.decoder_input.length;
  b.targets.assign(indices.size() * len, kPadId);
  b.target_mask.assign(indices.size() * len, 0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& y = pairs[indices[r]].y;
    for (std::size_t t = 0; t <= y.size(); ++t) {
      b.targets[r * len + t] = t < y.size() ? y[t] : kEosId;
      b.target_mask[r * len + t] = 1;
    }
  }
  return b;
}

// Length-bucketed batches under a token budget (source + target real tokens
// per pair). Pairs are shuffled by seed, stably sorted by length, packed
// greedily, then the batch order is shuffled. Every pair lands in exactly one
// batch.
inline std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, std::size_t token_budget,
                                       std::uint64_t seed) {
  if (pairs.empty()) throw DataError("cannot batch an empty corpus");
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pair_tokens(pairs[i]) > token_budget)
      throw DataError("sentence pair at line " + std::to_string(i + 1) + " has " + std::to_string(pair_tokens(pairs[i])) +
                      " tokens, exceeding the batch budget of " + std::to_string(token_budget));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = std::make_pair(pairs[a].y.size(), pairs[a].x.size());
    const auto kb = std::make_pair(pairs[b].y.size(), pairs[b].x.size());
    return ka < kb;
  });
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  std::size_t used = 0;
  for (std::size_t i : order) {
    const std::size_t n = pair_tokens(pairs[i]);
    if (!current.empty() && used + n > token_budget) {
      groups.push_back(std::move(current));
      current.clear();
      used = 0;
    }
    current.push_back(i);
    used += n;
  }
  if (!current.empty()) groups.push_back(std::move(current));
  Rng order_rng(mix_seed(seed, 1));
  order_rng.shuffle(groups);
  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(pairs, g));
  return batches;
}

// Fixed-size batches in corpus order, for evaluation.
inline std::vector<Batch> sequential_batches(const std::vector<SentencePair>& pairs, std::size_t per_batch) {
  std::vector<Batch> out;
  for (std::size_t start = 0; start < pairs.size(); start += per_batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(pairs.size(), start + per_batch); ++i) idx.push_back(i);
    out.push_back(make_batch(pairs, idx));
  }
  return out;
}

}  // namespace tsnmt
