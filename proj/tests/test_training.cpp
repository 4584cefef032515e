#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace tsnmt;
using testutil::tiny_config;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<SentencePair> toy_pairs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto x = testutil::random_sentence(rng, 1 + rng.below(5), 11);
    out.push_back({x, x});
  }
  return out;
}

TrainRunConfig quick_run(std::uint64_t steps) {
  TrainRunConfig c;
  c.max_steps = steps;
  c.tokens_per_batch = 40;
  c.lr = 1e-2;
  c.warmup = 2;
  c.valid_every = 3;
  c.checkpoint_every = 3;
  c.schedule = {2, 0.5, 1};
  c.record_timing = false;
  return c;
}

Vocabulary toy_vocab() { return Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f", "g"}); }

}  // namespace

TEST(Optimizer, LearningRateSchedule) {
  const LearningRateSchedule lr{1e-3, 100, 1100};
  EXPECT_EQ(lr(0), 0.0);
  EXPECT_DOUBLE_EQ(lr(50), 5e-4);
  EXPECT_DOUBLE_EQ(lr(100), 1e-3);
  EXPECT_DOUBLE_EQ(lr(600), 5e-4);
  EXPECT_EQ(lr(1100), 0.0);
  EXPECT_THROW((LearningRateSchedule{1e-3, 200, 100}.validate()), ConfigError);
}

// Scripted oracle: three hand-unrolled Adam steps on one scalar.
TEST(Optimizer, AdamMatchesScriptedOracle) {
  const AdamHyper h{0.9, 0.98, 1e-8};
  std::vector<double> param{0.5}, m{0}, v{0};
  const double grads[] = {0.2, -0.1, 0.4};
  const double lr = 0.01;
  double p = 0.5, mm = 0, vv = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    adam_update<double>(param, std::vector<double>{g}, m, v, h, lr, static_cast<std::uint64_t>(t));
    mm = 0.9 * mm + 0.1 * g;
    vv = 0.98 * vv + 0.02 * g * g;
    p -= lr * (mm / (1 - std::pow(0.9, t))) / (std::sqrt(vv / (1 - std::pow(0.98, t))) + 1e-8);
    EXPECT_NEAR(param[0], p, 1e-12);
  }
  // First step moves by lr·sign(g) up to eps.
  std::vector<double> q{0.0}, m2{0}, v2{0};
  adam_update<double>(q, std::vector<double>{3.0}, m2, v2, h, lr, 1);
  EXPECT_NEAR(q[0], -lr, 1e-10);
}

TEST(Optimizer, ClippingAndNonFiniteGradients) {
  auto p = TransformerParams<double>::init(tiny_config(), 1);
  auto named = p.named_parameters();
  for (auto& [n, t] : named) std::fill(t.grad().begin(), t.grad().end(), 1.0);
  const double before = global_grad_norm(named);
  EXPECT_NEAR(before, std::sqrt(static_cast<double>(p.parameter_count())), 1e-9);
  clip_gradients(named, 2.0);
  EXPECT_NEAR(global_grad_norm(named), 2.0, 1e-9);
  named[3].second.grad()[0] = std::nan("");
  try {
    clip_gradients(named, 2.0);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find(named[3].first), std::string::npos);
  }
}

TEST(Training, StepReducesLossOnFixedBatch) {
  auto p = TransformerParams<double>::init(tiny_config(), 2);
  const auto pairs = toy_pairs(4, 2);
  const auto batch = make_batch(pairs, {0, 1, 2, 3});
  OptimizerState opt;
  opt.init_for(p.named_parameters());
  auto cfg = quick_run(30);
  cfg.warmup = 1;
  cfg.schedule.alpha = 1000;
  opt.lr = cfg.learning_rate_schedule();
  const double first = train_step(batch, p, opt, cfg).loss.nll;
  double last = first;
  for (int i = 0; i < 20; ++i) last = train_step(batch, p, opt, cfg).loss.nll;
  EXPECT_LT(last, 0.5 * first);
  EXPECT_EQ(opt.step, 21u);
}

// With lambda = 0 the correction loss is reported but must not move the
// parameters: the update equals that of a run without it.
TEST(Training, ZeroLambdaContributesNoGradient) {
  const auto pairs = toy_pairs(6, 3);
  const auto batch = make_batch(pairs, {0, 1, 2, 3, 4, 5});
  auto cfg = quick_run(10);
  cfg.schedule = {0, 0.5, 1};
  cfg.weights.lambda = 0.0;
  auto a = TransformerParams<double>::init(tiny_config(), 3);
  auto b = a.clone();
  OptimizerState oa, ob;
  oa.init_for(a.named_parameters());
  ob.init_for(b.named_parameters());
  oa.lr = ob.lr = cfg.learning_rate_schedule();
  const auto ra = train_step(batch, a, oa, cfg);
  auto off = cfg;
  off.enable_ecm = false;
  train_step(batch, b, ob, off);
  EXPECT_GT(ra.loss.ecm, 0.0);
  const auto na = a.named_parameters(), nb = b.named_parameters();
  for (std::size_t i = 0; i < na.size(); ++i)
    for (std::size_t k = 0; k < na[i].second.size(); ++k) ASSERT_EQ(na[i].second[k], nb[i].second[k]) << na[i].first;
}

TEST(Training, AblationFlagValidation) {
  TrainRunConfig c;
  c.enable_tssa = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c.enable_ecm = false;
  EXPECT_NO_THROW(c.validate());
  auto p = TransformerParams<float>::init(tiny_config(), 1);
  OptimizerState opt;
  c.max_steps = 10;
  c.warmup = 1;
  EXPECT_THROW(train(p, opt, toy_pairs(3, 1), toy_pairs(3, 2), c), ConfigError);
}

TEST(Training, ResumeContinuesExactly) {
  const auto pairs = toy_pairs(30, 4), valid = toy_pairs(5, 5);
  const auto src = toy_vocab(), tgt = toy_vocab();
  const auto full_dir = testutil::temp_dir("resume_full"), split_dir = testutil::temp_dir("resume_split");
  const auto init = TransformerParams<float>::init(tiny_config(), 4);

  auto full = init.clone();
  OptimizerState opt_full;
  train(full, opt_full, pairs, valid, quick_run(9), TrainOutputs{full_dir.string(), &src, &tgt, {}, {}});

  auto first = init.clone();
  OptimizerState opt_first;
  auto interrupted = quick_run(9);
  interrupted.stop_after = 5;
  const TrainOutputs io{split_dir.string(), &src, &tgt, {}, {}};
  train(first, opt_first, pairs, valid, interrupted, io);
  auto ck = load_checkpoint<float>((split_dir / "checkpoint_last.bin").string());
  EXPECT_EQ(ck.optimizer.step, 5u);
  const auto sum = train(ck.params, ck.optimizer, pairs, valid, quick_run(9), io);
  EXPECT_EQ(sum.first_step, 6u);

  const auto a = full.named_parameters(), b = ck.params.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].second.size(); ++k) ASSERT_EQ(a[i].second[k], b[i].second[k]) << a[i].first;
  // Step 5 gets an extra validation entry in the interrupted run; every
  // other row is identical.
  auto drop_step5 = [](const std::string& csv) {
    std::istringstream in(csv);
    std::string out, line;
    while (std::getline(in, line))
      if (line.rfind("5,", 0) != 0) out += line + "\n";
    return out;
  };
  EXPECT_EQ(drop_step5(slurp(full_dir / "metrics.csv")), drop_step5(slurp(split_dir / "metrics.csv")));
}

TEST(Training, MetricsTruncationOnResume) {
  const auto dir = testutil::temp_dir("metrics");
  const auto path = (dir / "metrics.csv").string();
  {
    std::ofstream o(path);
    o << kMetricsHeader << "\n1,0,1,2,0,2,,0.0\n2,0,1,2,0,2,,0.0\n3,0,1,2,0,2,,0.0\n";
  }
  EXPECT_TRUE(truncate_metrics(path, 2));
  EXPECT_EQ(slurp(path), std::string(kMetricsHeader) + "\n1,0,1,2,0,2,,0.0\n2,0,1,2,0,2,,0.0\n");
  EXPECT_FALSE(truncate_metrics((dir / "none.csv").string(), 2));
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  const auto dir = testutil::temp_dir("ckpt");
  auto cfg = tiny_config();
  cfg.share_correction_head = false;
  auto p = TransformerParams<float>::init(cfg, 5);
  OptimizerState opt;
  opt.init_for(p.named_parameters());
  opt.step = 17;
  opt.m[2][1] = 0.25;
  opt.v[4][0] = 1e-300;
  const auto src = toy_vocab(), tgt = Vocabulary::from_tokens({"p", "q", "r", "s", "t", "u", "w"});
  const auto path = (dir / "c.bin").string();
  save_checkpoint(path, p, &opt, src, tgt, {{"note", "hello"}});
  auto ck = load_checkpoint<float>(path, &cfg);
  EXPECT_EQ(ck.params.config, cfg);
  EXPECT_TRUE(ck.has_optimizer);
  EXPECT_EQ(ck.optimizer.step, 17u);
  EXPECT_EQ(ck.optimizer.m, opt.m);
  EXPECT_EQ(ck.optimizer.v, opt.v);
  EXPECT_EQ(ck.src_vocab, src);
  EXPECT_EQ(ck.tgt_vocab, tgt);
  EXPECT_EQ(ck.meta.at("note"), "hello");
  const auto a = p.named_parameters(), b = ck.params.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
  save_checkpoint((dir / "d.bin").string(), ck.params, &ck.optimizer, ck.src_vocab, ck.tgt_vocab, ck.meta);
  EXPECT_EQ(slurp(path), slurp(dir / "d.bin"));
}

TEST(Checkpoint, TruncatedAndCorruptFilesAreRejected) {
  const auto dir = testutil::temp_dir("ckpt_bad");
  auto p = TransformerParams<float>::init(tiny_config(), 6);
  const auto path = (dir / "c.bin").string();
  save_checkpoint(path, p, nullptr, toy_vocab(), toy_vocab());
  const auto bytes = slurp(path);
  {
    std::ofstream o(dir / "trunc.bin", std::ios::binary);
    o << bytes.substr(0, bytes.size() - 7);
  }
  EXPECT_THROW(load_checkpoint<float>((dir / "trunc.bin").string()), CheckpointError);
  {
    std::ofstream o(dir / "junk.bin", std::ios::binary);
    o << "not a checkpoint\n";
  }
  EXPECT_THROW(load_checkpoint<float>((dir / "junk.bin").string()), CheckpointError);
  EXPECT_THROW(load_checkpoint<double>(path), CheckpointError);
  EXPECT_THROW(load_checkpoint<float>((dir / "missing.bin").string()), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchNamesTheArray) {
  const auto dir = testutil::temp_dir("ckpt_shape");
  auto p = TransformerParams<float>::init(tiny_config(), 7);
  const auto path = (dir / "c.bin").string();
  save_checkpoint(path, p, nullptr, toy_vocab(), toy_vocab());
  auto other = tiny_config(11, 2, 16, 2);
  try {
    load_checkpoint<float>(path, &other);
    FAIL();
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape mismatch for array"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[11x8]"), std::string::npos) << msg;
  }
}

TEST(Training, DivergenceNamesTheStep) {
  auto p = TransformerParams<double>::init(tiny_config(), 8);
  p.out_b[0] = std::nan("");
  const auto batch = make_batch(toy_pairs(2, 8), {0, 1});
  OptimizerState opt;
  opt.init_for(p.named_parameters());
  auto cfg = quick_run(5);
  opt.lr = cfg.learning_rate_schedule();
  try {
    train_step(batch, p, opt, cfg);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}
