#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tsnmt/checkpoint.hpp"
#include "tsnmt/config.hpp"
#include "tsnmt/data.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/inference.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/objectives.hpp"
#include "tsnmt/optimizer.hpp"
#include "tsnmt/schedule.hpp"

namespace tsnmt {

struct TrainRunConfig {
  std::uint64_t max_steps = 100000;
  std::size_t tokens_per_batch = 2048;
  std::uint64_t seed = 1;
  bool enable_ecm = true;
  bool enable_ss = true;
  bool enable_tssa = true;
  SampleSchedule schedule;
  LossWeights weights;
  FirstPassMode first_pass = FirstPassMode::sample;
  double label_smoothing = 0.0;
  double lr = 5e-4;
  std::uint64_t warmup = 4000;
  double clip_norm = 5.0;
  std::uint64_t valid_every = 500;
  std::uint64_t checkpoint_every = 1000;
  std::uint64_t log_every = 1;
  // Stop once teacher-forced validation token accuracy reaches this value
  // (0 disables).
  double stop_at_valid_accuracy = 0.0;
  // End the run after this step; the schedules still span max_steps, so a
  // resumed run continues as if uninterrupted (0 disables).
  std::uint64_t stop_after = 0;
  bool record_timing = true;

  void validate() const {
    if (!enable_tssa && enable_ecm)
      throw ConfigError("the standard decoder has no correction stream: disable ECM when disabling two-stream attention");
    if (max_steps == 0) throw ConfigError("train.steps must be >= 1");
    if (tokens_per_batch == 0) throw ConfigError("train.tokens_per_batch must be >= 1");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("train.label_smoothing must lie in [0,1)");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
    if (valid_every == 0 || checkpoint_every == 0 || log_every == 0)
      throw ConfigError("train.valid_every, train.checkpoint_every and train.log_every must be >= 1");
    if (!(stop_at_valid_accuracy >= 0.0 && stop_at_valid_accuracy <= 1.0))
      throw ConfigError("train.stop_at_valid_accuracy must lie in [0,1]");
    schedule.validate();
    weights.validate();
    learning_rate_schedule().validate();
  }

  LearningRateSchedule learning_rate_schedule() const { return {lr, warmup, max_steps}; }

  DecoderMode decoder_mode() const { return enable_tssa ? DecoderMode::two_stream : DecoderMode::standard; }
};

struct StepResult {
  LossBreakdown loss;  // summed over the batch
  std::uint64_t step = 0;
  double lr = 0.0;
  double p_keep = 1.0;
  double grad_norm = 0.0;
  std::size_t corrupted = 0;
  std::size_t src_tokens = 0, tgt_tokens = 0;
};

namespace detail {
inline constexpr std::uint64_t kTapeSalt = 0x7461706564726f70ULL;
}

// Inputs the model sees for a batch at step s: the mixed decoder input and the
// corruption mask over it.
struct MixedBatch {
  TokenBatch tilde;
  std::vector<std::uint8_t> corruption_mask;
  double p_keep = 1.0;
};

template <typename S>
MixedBatch prepare_inputs(const TransformerParams<S>& params, const Batch& batch, const TrainRunConfig& cfg,
                          std::uint64_t s) {
  MixedBatch mb;
  mb.tilde = batch.decoder_input;
  mb.corruption_mask.assign(batch.decoder_input.ids.size(), 0);
  if (!cfg.enable_ss) return mb;
  mb.p_keep = keep_probability(static_cast<double>(s), cfg.schedule);
  if (static_cast<double>(s) <= cfg.schedule.alpha) return mb;
  Rng rng(mix_seed(cfg.seed, s));
  const auto y_prime = first_pass_predictions(params, batch.source, batch.decoder_input, rng, cfg.first_pass);
  auto mix = mix_targets(batch.decoder_input.ids, y_prime, mb.p_keep, rng);
  mb.tilde.ids = std::move(mix.tilde_y);
  mb.corruption_mask = std::move(mix.corruption_mask);
  return mb;
}

// Forward pass producing the summed losses on `tape`. The differentiable
// objective is returned in `objective` (nll + λ·ecm, summed).
template <typename S>
LossBreakdown forward_losses(Tape<S>& tape, const TransformerParams<S>& params, const Batch& batch,
                             const MixedBatch& mb, const TrainRunConfig& cfg, Tensor<S>& objective) {
  const bool ecm = cfg.enable_ecm && params.config.decoder_mode == DecoderMode::two_stream;
  const auto enc = encode(tape, params, batch.source);
  DecoderOptions opt;
  opt.content_logits = ecm;
  const auto out = decoder_forward(tape, params, mb.tilde, enc, opt);
  auto nll = nll_loss(tape, out.query_logits, std::span<const int>(batch.targets),
                      std::span<const std::uint8_t>(batch.target_mask), cfg.label_smoothing);
  LossBreakdown b;
  b.nll_tokens = batch.tgt_tokens + batch.size();
  if (ecm) {
    auto e = ecm_loss(tape, out.content_logits, std::span<const int>(batch.decoder_input.ids),
                      std::span<const std::uint8_t>(mb.corruption_mask), cfg.label_smoothing);
    b = combined_loss(nll.item(), e.item(), cfg.weights);
    b.nll_tokens = batch.tgt_tokens + batch.size();
    objective = add_scaled(tape, nll, e, S(cfg.weights.lambda));
  } else {
    b = combined_loss(nll.item(), 0.0, cfg.weights);
    b.nll_tokens = batch.tgt_tokens + batch.size();
    objective = nll;
  }
  for (auto f : mb.corruption_mask) b.ecm_tokens += f;
  return b;
}

// One optimization step at s = opt.step + 1: optional first pass and mixing,
// forward, backward of the per-target-token objective, clipping and Adam.
template <typename S>
StepResult train_step(const Batch& batch, TransformerParams<S>& params, OptimizerState& opt, const TrainRunConfig& cfg) {
  const std::uint64_t s = opt.step + 1;
  StepResult r;
  r.step = s;
  r.src_tokens = batch.src_tokens;
  r.tgt_tokens = batch.tgt_tokens;
  const auto mb = prepare_inputs(params, batch, cfg, s);
  r.p_keep = mb.p_keep;
  const auto named = params.named_parameters();
  params.zero_grad();
  Tape<S> tape(mix_seed(cfg.seed ^ detail::kTapeSalt, s), true, true);
  Tensor<S> objective;
  try {
    r.loss = forward_losses(tape, params, batch, mb, cfg, objective);
  } catch (const DivergenceError& e) {
    throw DivergenceError("step " + std::to_string(s) + ": " + e.what());
  }
  r.corrupted = r.loss.ecm_tokens;
  auto scaled = scale(tape, objective, S(1) / static_cast<S>(r.loss.nll_tokens));
  tape.backward(scaled);
  try {
    r.grad_norm = clip_gradients(named, cfg.clip_norm);
    r.lr = optimizer_step(opt, named);
  } catch (const DivergenceError& e) {
    throw DivergenceError("step " + std::to_string(s) + ": " + e.what());
  }
  return r;
}

struct ValidationStats {
  double nll = 0.0;       // per target token (including eos)
  double accuracy = 0.0;  // teacher-forced token accuracy
  std::size_t tokens = 0;
};

// Teacher-forced evaluation with dropout off.
template <typename S>
ValidationStats evaluate_teacher_forced(const TransformerParams<S>& params, const std::vector<Batch>& batches) {
  ValidationStats v;
  double nll = 0.0;
  std::size_t hit = 0;
  const std::size_t vocab = params.config.tgt_vocab_size;
  for (const auto& b : batches) {
    Tape<S> tape(0, false, false);
    const auto enc = encode(tape, params, b.source);
    DecoderOptions opt;
    opt.content_logits = false;
    const auto out = decoder_forward(tape, params, b.decoder_input, enc, opt);
    nll += nll_loss(tape, out.query_logits, std::span<const int>(b.targets), std::span<const std::uint8_t>(b.target_mask))
               .item();
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
      if (!b.target_mask[r]) continue;
      ++v.tokens;
      hit += argmax_candidate<S>(std::span<const S>(out.query_logits.ptr() + r * vocab, vocab)) == b.targets[r];
    }
  }
  if (v.tokens) {
    v.nll = nll / static_cast<double>(v.tokens);
    v.accuracy = static_cast<double>(hit) / static_cast<double>(v.tokens);
  }
  return v;
}

inline const char* kMetricsHeader = "step,lr,p_keep,nll,ecm,combined,valid_nll,tokens_per_sec";

struct MetricsRow {
  std::uint64_t step = 0;
  double lr = 0, p_keep = 1, nll = 0, ecm = 0, combined = 0;
  std::optional<double> valid_nll;
  double tokens_per_sec = 0;

  std::string csv() const {
    char buf[512];
    std::string valid = "";
    if (valid_nll) {
      char v[64];
      std::snprintf(v, sizeof v, "%.9g", *valid_nll);
      valid = v;
    }
    std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%.1f", static_cast<unsigned long long>(step), lr,
                  p_keep, nll, ecm, combined, valid.c_str(), tokens_per_sec);
    return buf;
  }
};

// Keeps the header and every row with step <= last_step; returns false when
// the file does not exist.
inline bool truncate_metrics(const std::string& path, std::uint64_t last_step) {
  std::ifstream in(path);
  if (!in) return false;
  std::vector<std::string> keep;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      if (line != kMetricsHeader) throw DataError(path + " is not a metrics file");
      header = false;
      keep.push_back(line);
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (std::stoull(line.substr(0, comma)) <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
  return true;
}

struct TrainOutputs {
  std::string out_dir;  // empty: nothing is written
  const Vocabulary* src_vocab = nullptr;
  const Vocabulary* tgt_vocab = nullptr;
  std::map<std::string, std::string> meta;
  std::function<void(const std::string&)> log;
};

struct TrainSummary {
  std::uint64_t first_step = 0, last_step = 0;
  double final_train_nll = 0.0;   // per token, last step
  double initial_train_nll = 0.0; // per token, first step of this run
  ValidationStats last_valid;
  double best_valid_nll = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  double seconds = 0.0;
  std::vector<MetricsRow> rows;
};

// Training loop. Step s uses batch (s-1) of the epoch sequence, where epoch
// e shuffles with seed mix(seed, e); all randomness is a function of (seed,
// s), so resuming from a checkpoint at step k continues exactly.
template <typename S>
TrainSummary train(TransformerParams<S>& params, OptimizerState& opt, const std::vector<SentencePair>& train_pairs,
                   const std::vector<SentencePair>& valid_pairs, const TrainRunConfig& cfg, const TrainOutputs& io = {}) {
  cfg.validate();
  if (params.config.decoder_mode != cfg.decoder_mode())
    throw ConfigError("model decoder mode " + to_string(params.config.decoder_mode) +
                      " does not match the training flags");
  if (opt.m.empty()) opt.init_for(params.named_parameters());
  opt.lr = cfg.learning_rate_schedule();
  const auto log = [&](const std::string& msg) {
    if (io.log) io.log(msg);
  };
  namespace fs = std::filesystem;
  const bool write = !io.out_dir.empty();
  std::string metrics_path, last_path, best_path;
  std::ofstream metrics;
  if (write) {
    if (!io.src_vocab || !io.tgt_vocab) throw ContractError("train(): vocabularies are required to write checkpoints");
    fs::create_directories(io.out_dir);
    metrics_path = (fs::path(io.out_dir) / "metrics.csv").string();
    last_path = (fs::path(io.out_dir) / "checkpoint_last.bin").string();
    best_path = (fs::path(io.out_dir) / "checkpoint_best.bin").string();
    const bool existed = opt.step > 0 && truncate_metrics(metrics_path, opt.step);
    metrics.open(metrics_path, existed ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + metrics_path);
    if (!existed) metrics << kMetricsHeader << '\n';
  }
  const auto valid_batches = sequential_batches(valid_pairs, 64);

  TrainSummary sum;
  sum.first_step = opt.step + 1;
  std::uint64_t epoch = 0, consumed = 0;
  std::vector<Batch> epoch_batches = make_batches(train_pairs, cfg.tokens_per_batch, mix_seed(cfg.seed, epoch));
  while (consumed + epoch_batches.size() <= opt.step) {
    consumed += epoch_batches.size();
    epoch_batches = make_batches(train_pairs, cfg.tokens_per_batch, mix_seed(cfg.seed, ++epoch));
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto save = [&](const std::string& path) {
    if (write) save_checkpoint(path, params, &opt, *io.src_vocab, *io.tgt_vocab, io.meta);
  };
  bool have_good = false;

  while (opt.step < cfg.max_steps) {
    if (opt.step - consumed >= epoch_batches.size()) {
      consumed += epoch_batches.size();
      epoch_batches = make_batches(train_pairs, cfg.tokens_per_batch, mix_seed(cfg.seed, ++epoch));
    }
    const Batch& batch = epoch_batches[opt.step - consumed];
    const auto ts = std::chrono::steady_clock::now();
    StepResult r;
    try {
      r = train_step(batch, params, opt, cfg);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + (have_good ? "; last good checkpoint: " + last_path
                                                               : "; no checkpoint written yet"));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - ts).count();
    const double denom = static_cast<double>(r.loss.nll_tokens);
    MetricsRow row;
    row.step = r.step;
    row.lr = r.lr;
    row.p_keep = r.p_keep;
    row.nll = r.loss.nll / denom;
    row.ecm = r.loss.ecm / denom;
    row.combined = r.loss.combined / denom;
    if (cfg.record_timing && secs > 0) row.tokens_per_sec = static_cast<double>(r.src_tokens + r.tgt_tokens) / secs;
    if (r.step == sum.first_step) sum.initial_train_nll = row.nll;
    sum.final_train_nll = row.nll;

    const bool last = r.step == cfg.max_steps || r.step == cfg.stop_after;
    bool stop = false;
    if (r.step % cfg.valid_every == 0 || last) {
      sum.last_valid = evaluate_teacher_forced(params, valid_batches);
      row.valid_nll = sum.last_valid.nll;
      char msg[256];
      std::snprintf(msg, sizeof msg, "step %llu  train_nll %.4f  valid_nll %.4f  valid_acc %.4f",
                    static_cast<unsigned long long>(r.step), row.nll, sum.last_valid.nll, sum.last_valid.accuracy);
      log(msg);
      if (sum.last_valid.nll < sum.best_valid_nll) {
        sum.best_valid_nll = sum.last_valid.nll;
        save(best_path);
      }
      if (cfg.stop_at_valid_accuracy > 0.0 && sum.last_valid.accuracy >= cfg.stop_at_valid_accuracy) stop = true;
    }
    if (r.step % cfg.log_every == 0 || last || stop || row.valid_nll) {
      if (write) metrics << row.csv() << '\n' << std::flush;
      sum.rows.push_back(row);
    }
    if (r.step % cfg.checkpoint_every == 0 || last || stop) {
      save(last_path);
      have_good = write;
    }
    sum.last_step = r.step;
    if (r.step == cfg.stop_after) break;
    if (stop) {
      sum.stopped_early = true;
      log("validation accuracy target reached at step " + std::to_string(r.step));
      break;
    }
  }
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return sum;
}

}  // namespace tsnmt
