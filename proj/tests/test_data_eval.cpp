#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "test_util.hpp"

using namespace tsnmt;

namespace {

std::vector<std::vector<std::string>> lines(std::initializer_list<const char*> xs) {
  std::vector<std::vector<std::string>> out;
  for (const char* x : xs) out.push_back(split_whitespace(x));
  return out;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream o(p);
  o << text;
}

}  // namespace

TEST(Vocabulary, FrequencyRankingWithLexicographicTies) {
  auto v = Vocabulary::build(lines({"b a c a", "c d"}));
  EXPECT_EQ(v.regular_tokens(), (std::vector<std::string>{"a", "c", "b", "d"}));
  EXPECT_EQ(v.size(), kNumReserved + 4);
  EXPECT_EQ(v.id("a"), static_cast<int>(kNumReserved));
  EXPECT_EQ(v.id("zzz"), kUnkId);
  EXPECT_EQ(v.token(kEosId), "</s>");
}

TEST(Vocabulary, SizeAndCountLimits) {
  auto capped = Vocabulary::build(lines({"b a c a", "c d"}), kNumReserved + 2);
  EXPECT_EQ(capped.regular_tokens(), (std::vector<std::string>{"a", "c"}));
  auto frequent = Vocabulary::build(lines({"b a c a", "c d"}), 0, 2);
  EXPECT_EQ(frequent.regular_tokens(), (std::vector<std::string>{"a", "c"}));
  EXPECT_THROW(Vocabulary::build({}), DataError);
}

TEST(Vocabulary, EncodeDecodeAndFileRoundTrip) {
  auto v = Vocabulary::build(lines({"x y z"}));
  const auto ids = v.encode({"z", "q", "x"});
  EXPECT_EQ(ids, (std::vector<int>{v.id("z"), kUnkId, v.id("x")}));
  EXPECT_EQ(v.decode({v.id("x"), kEosId, v.id("y")}), (std::vector<std::string>{"x"}));
  const auto dir = testutil::temp_dir("vocab");
  v.save((dir / "v.txt").string());
  EXPECT_EQ(Vocabulary::load((dir / "v.txt").string()), v);
}

TEST(Corpus, ParallelFilesMustAlign) {
  const auto dir = testutil::temp_dir("corpus");
  write_file(dir / "a.src", "a b\nc\n");
  write_file(dir / "a.tgt", "x\n");
  EXPECT_THROW(read_parallel((dir / "a.src").string(), (dir / "a.tgt").string()), DataError);
  write_file(dir / "b.tgt", "x\n\n");
  EXPECT_THROW(read_parallel((dir / "a.src").string(), (dir / "b.tgt").string()), DataError);
  write_file(dir / "c.tgt", "x y\nz\n");
  auto text = read_parallel((dir / "a.src").string(), (dir / "c.tgt").string());
  EXPECT_EQ(text.target[0], (std::vector<std::string>{"x", "y"}));
  EXPECT_THROW(read_tokenized((dir / "missing").string()), DataError);
}

TEST(Synthetic, LexiconIsAWordForWordMapping) {
  SyntheticSpec spec;
  spec.num_pairs = 500;
  const auto t = generate_synthetic_task(spec);
  std::map<std::string, std::string> dict;
  for (std::size_t i = 0; i < t.source.size(); ++i) {
    ASSERT_EQ(t.source[i].size(), t.target[i].size());
    ASSERT_LE(t.source[i].size(), 12u);
    for (std::size_t k = 0; k < t.source[i].size(); ++k) {
      auto [it, fresh] = dict.emplace(t.source[i][k], t.target[i][k]);
      EXPECT_EQ(it->second, t.target[i][k]);
    }
  }
}

TEST(Synthetic, ReversalAndNoise) {
  SyntheticSpec spec;
  spec.num_pairs = 300;
  const auto lex = generate_synthetic_task(spec);
  spec.kind = SyntheticTask::reversal;
  const auto rev = generate_synthetic_task(spec);
  for (std::size_t i = 0; i < lex.target.size(); ++i)
    EXPECT_EQ(rev.target[i], std::vector<std::string>(lex.target[i].rbegin(), lex.target[i].rend()));
  spec.kind = SyntheticTask::noisy_lexicon;
  spec.noise = 0.0;
  EXPECT_EQ(generate_synthetic_task(spec).source, lex.source);
  spec.noise = 0.2;
  const auto noisy = generate_synthetic_task(spec);
  EXPECT_EQ(noisy.target, lex.target);
  std::size_t changed = 0, total = 0;
  for (std::size_t i = 0; i < lex.source.size(); ++i)
    for (std::size_t k = 0; k < lex.source[i].size(); ++k, ++total) changed += noisy.source[i][k] != lex.source[i][k];
  const double rate = static_cast<double>(changed) / static_cast<double>(total);
  EXPECT_GT(rate, 0.14);
  EXPECT_LT(rate, 0.24);
}

TEST(Batching, LayoutOfOneBatch) {
  std::vector<SentencePair> pairs{{{4, 5}, {6, 7, 8}}, {{9}, {10}}};
  const auto b = make_batch(pairs, {0, 1});
  EXPECT_EQ(b.decoder_input.length, 4u);
  EXPECT_EQ(b.decoder_input.ids, (std::vector<int>{kBosId, 6, 7, 8, kBosId, 10, kPadId, kPadId}));
  EXPECT_EQ(b.targets, (std::vector<int>{6, 7, 8, kEosId, 10, kEosId, kPadId, kPadId}));
  EXPECT_EQ(b.target_mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 0, 0}));
  EXPECT_EQ(b.src_tokens, 3u);
  EXPECT_EQ(b.tgt_tokens, 4u);
}

TEST(Batching, EveryPairOnceWithinBudget) {
  Rng rng(4);
  std::vector<SentencePair> pairs;
  for (int i = 0; i < 200; ++i)
    pairs.push_back({testutil::random_sentence(rng, 1 + rng.below(10), 20), testutil::random_sentence(rng, 1 + rng.below(10), 20)});
  const auto batches = make_batches(pairs, 60, 9);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    std::size_t tokens = 0;
    for (auto i : b.pair_indices) {
      seen.insert(i);
      tokens += pair_tokens(pairs[i]);
    }
    EXPECT_LE(tokens, 60u);
  }
  EXPECT_EQ(seen.size(), pairs.size());
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), pairs.size());
  const auto again = make_batches(pairs, 60, 9);
  ASSERT_EQ(again.size(), batches.size());
  for (std::size_t i = 0; i < again.size(); ++i) EXPECT_EQ(again[i].pair_indices, batches[i].pair_indices);
}

TEST(Batching, OversizedPairNamesItsLine) {
  std::vector<SentencePair> pairs{{{4}, {5}}, {{4, 4, 4}, {5, 5, 5}}};
  try {
    make_batches(pairs, 4, 1);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Bleu, IdenticalCorpusScoresHundred) {
  auto ref = lines({"the cat sat on the mat", "a quick brown fox jumps"});
  const auto r = corpus_bleu(ref, ref);
  EXPECT_DOUBLE_EQ(r.bleu, 100.0);
  EXPECT_EQ(r.summary(), "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=11, ref_len=11)");
}

TEST(Bleu, ShortHypothesisWithoutFourGramsScoresZero) {
  const auto r = corpus_bleu(lines({"the cat sat"}), lines({"the cat sat down"}));
  EXPECT_EQ(r.bleu, 0.0);
  EXPECT_DOUBLE_EQ(r.precisions[2], 1.0);
  EXPECT_NEAR(r.brevity_penalty, std::exp(1.0 - 4.0 / 3.0), 1e-12);
}

TEST(Bleu, ClippedCountsAndBrevity) {
  // Hand computed: p1 = 2/7 (clipped "the"), p2..p4 from the bigram "the cat".
  const auto r = corpus_bleu(lines({"the the the the the the the"}), lines({"the cat is on the mat"}));
  EXPECT_EQ(r.matches[0], 2u);
  EXPECT_EQ(r.totals[0], 7u);
  EXPECT_EQ(r.bleu, 0.0);
  const auto r2 = corpus_bleu(lines({"a b c d e"}), lines({"a b c d e f g h i j"}));
  EXPECT_NEAR(r2.brevity_penalty, std::exp(-1.0), 1e-12);
  EXPECT_NEAR(r2.bleu, 100.0 * std::exp(-1.0), 1e-9);
}

TEST(Bleu, EmptyHypothesesAndMismatchedCorpora) {
  EXPECT_EQ(corpus_bleu(lines({""}), lines({"a b"})).bleu, 0.0);
  EXPECT_THROW(corpus_bleu(lines({"a"}), lines({"a", "b"})), LengthError);
}

TEST(Accuracy, TokenAndSequence) {
  EXPECT_DOUBLE_EQ(token_accuracy({5, 6, 7, 0}, {5, 9, 7, 0}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(token_accuracy({5, 6}, {5, 6}, {0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(sequence_accuracy(lines({"a b", "c"}), lines({"a b", "d"})), 0.5);
  EXPECT_THROW(token_accuracy({1}, {1, 2}), LengthError);
}

TEST(Recovery, PooledRateBucketsAndVacuousRuns) {
  CorrectionResult a;
  a.positions = {0, 2};
  a.recovered = 1;
  a.corruption_rate = 0.15;
  CorrectionResult b;
  b.corruption_rate = 0.15;
  CorrectionResult c;
  c.positions = {1};
  c.recovered = 1;
  c.corruption_rate = 0.3;
  EXPECT_TRUE(std::isnan(b.recovery_rate()));
  const auto s = recovery_rate({a, b, c});
  EXPECT_EQ(s.vacuous_runs, 1u);
  EXPECT_EQ(s.corrupted, 3u);
  EXPECT_DOUBLE_EQ(s.rate(), 2.0 / 3.0);
  ASSERT_EQ(s.buckets.size(), 2u);
  EXPECT_DOUBLE_EQ(s.buckets[0].rate(), 0.5);
  EXPECT_THROW(recovery_rate({}), DataError);
  EXPECT_THROW(recovery_rate({b}), DataError);
}
