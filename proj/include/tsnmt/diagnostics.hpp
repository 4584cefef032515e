#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/data.hpp"
#include "tsnmt/gradcheck.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/random.hpp"
#include "tsnmt/schedule.hpp"
#include "tsnmt/training.hpp"

namespace tsnmt {

struct ToyGradCheckConfig {
  std::size_t layers = 2;
  std::size_t hidden = 8;
  std::size_t heads = 2;
  std::size_t vocab = 11;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  double step = 1e-5;
  double dropout = 0.1;
  double lambda = 1.0;
  bool share_correction_head = true;
};

// A two-sentence batch with a mixed decoder input whose corruption mask is
// guaranteed non-empty.
struct ToyProblem {
  TransformerParams<double> params;
  Batch batch;
  MixedBatch mixed;
};

inline ToyProblem make_toy_problem(const ToyGradCheckConfig& c) {
  ModelConfig mc;
  mc.num_layers = c.layers;
  mc.num_heads = c.heads;
  mc.hidden_size = c.hidden;
  mc.ffn_size = 2 * c.hidden;
  mc.src_vocab_size = c.vocab;
  mc.tgt_vocab_size = c.vocab;
  mc.max_positions = 16;
  mc.dropout = c.dropout;
  mc.share_correction_head = c.share_correction_head;
  ToyProblem t{TransformerParams<double>::init(mc, c.seed), {}, {}};
  Rng rng(mix_seed(c.seed, 0x746f79));
  const auto regular = static_cast<std::uint64_t>(c.vocab - kNumReserved);
  auto sentence = [&](std::size_t n) {
    std::vector<int> s(n);
    for (auto& x : s) x = static_cast<int>(kNumReserved + rng.below(regular));
    return s;
  };
  std::vector<SentencePair> pairs{{sentence(3), sentence(4)}, {sentence(5), sentence(2)}};
  t.batch = make_batch(pairs, {0, 1});
  t.mixed.tilde = t.batch.decoder_input;
  t.mixed.corruption_mask.assign(t.batch.decoder_input.ids.size(), 0);
  std::vector<int> y_prime(t.batch.decoder_input.ids.size(), kPadId);
  for (std::size_t i = 0; i < y_prime.size(); ++i)
    y_prime[i] = t.batch.decoder_input.ids[i] == kBosId ? kBosId : static_cast<int>(kNumReserved + rng.below(regular));
  auto mix = mix_targets(t.batch.decoder_input.ids, y_prime, 0.5, rng);
  // Force at least one corrupted position (row 0, position 1).
  if (std::find(mix.corruption_mask.begin(), mix.corruption_mask.end(), 1) == mix.corruption_mask.end()) {
    const int y1 = t.batch.decoder_input.ids[1];
    mix.tilde_y[1] = y1 + 1 < static_cast<int>(c.vocab) ? y1 + 1 : static_cast<int>(kNumReserved);
    mix.corruption_mask[1] = 1;
  }
  t.mixed.tilde.ids = mix.tilde_y;
  t.mixed.corruption_mask = mix.corruption_mask;
  return t;
}

// Finite-difference check of the training objective (nll + λ·ecm per target
// token, as in train_step) through the full two-stream forward, in f64 with
// dropout masks fixed.
inline GradCheckReport run_model_gradcheck(const ToyGradCheckConfig& c) {
  auto t = make_toy_problem(c);
  TrainRunConfig rc;
  rc.weights.lambda = c.lambda;
  const auto f = [&](Tape<double>& tape) {
    Tensor<double> objective;
    const auto loss = forward_losses(tape, t.params, t.batch, t.mixed, rc, objective);
    return scale(tape, objective, 1.0 / static_cast<double>(loss.nll_tokens));
  };
  GradCheckOptions opt;
  opt.tolerance = c.tolerance;
  opt.step = c.step;
  opt.seed = mix_seed(c.seed, 0x6763);
  opt.training = c.dropout > 0.0;
  return finite_difference_check<double>(f, t.params.named_parameters(), opt);
}

}  // namespace tsnmt
