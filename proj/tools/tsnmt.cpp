// Command-line front end: synth, train, translate, eval, diagnose, gradcheck,
// sweep and rerun.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tsnmt/tsnmt.hpp"

#ifndef TSNMT_VERSION
#define TSNMT_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace tsnmt;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::mutex log_mutex;

void log_line(const std::string& msg) {
  std::lock_guard<std::mutex> lock(log_mutex);
  std::cerr << msg << std::endl;
}

void warn(const std::string& msg) { log_line("warning: " + msg); }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Written before any compute. The arg lines replay the invocation; see
// `tsnmt rerun`.
void write_manifest(const fs::path& path, const std::string& command, const std::vector<std::string>& args,
                    std::uint64_t seed, const fs::path& out_dir,
                    const std::vector<std::pair<std::string, std::string>>& resolved) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  std::string joined;
  for (const auto& [k, v] : resolved) joined += k + "=" + v + "\n";
  out << "command: " << command << '\n';
  out << "version: " << TSNMT_VERSION << '\n';
  out << "seed: " << seed << '\n';
  out << "start_time: " << utc_now() << '\n';
  out << "out_dir: " << out_dir.string() << '\n';
  out << "config_hash: " << std::hex << fnv1a(command + "\n" + joined) << std::dec << '\n';
  for (const auto& a : args) out << "arg: " << a << '\n';
  for (const auto& [k, v] : resolved) out << "config." << k << ": " << v << '\n';
  if (!out) throw DataError("failed writing manifest " + path.string());
}

std::vector<std::pair<std::string, std::string>> resolved_pairs(const RunConfig& rc) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(resolved_config_text(rc));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    out.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  return out;
}

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---- training (shared by train and sweep) ----

struct TrainFlags {
  std::string config;
  std::vector<std::string> sets;
  bool no_ecm = false, no_ss = false, standard_decoder = false, resume = false, no_timing = false;
  std::optional<double> lambda, alpha, beta, mu;
  std::optional<std::uint64_t> steps, seed;
  std::string src, tgt, valid_src, valid_tgt;
};

void add_train_flags(CLI::App* c, TrainFlags& f) {
  c->add_option("--config", f.config, "Run configuration file (key = value)");
  c->add_option("--set", f.sets, "Override a configuration key: --set key=value");
  c->add_flag("--no-ecm", f.no_ecm, "Disable the error-correction loss");
  c->add_flag("--no-ss", f.no_ss, "Disable scheduled sampling (teacher forcing throughout)");
  c->add_flag("--standard-decoder", f.standard_decoder, "Use the conventional causal decoder");
  c->add_option("--lambda", f.lambda, "Weight of the correction loss");
  c->add_option("--alpha", f.alpha, "Last step of pure teacher forcing");
  c->add_option("--beta", f.beta, "Floor of the keep probability");
  c->add_option("--mu", f.mu, "Decay temperature of the keep probability");
  c->add_option("--steps", f.steps, "Number of optimizer steps");
  c->add_option("--seed", f.seed, "Random seed");
  c->add_option("--src", f.src, "Training source file");
  c->add_option("--tgt", f.tgt, "Training target file");
  c->add_option("--valid-src", f.valid_src, "Validation source file");
  c->add_option("--valid-tgt", f.valid_tgt, "Validation target file");
  c->add_flag("--no-timing", f.no_timing, "Write tokens_per_sec as 0 so metrics files are byte-comparable");
}

RunConfig resolve_train_config(const TrainFlags& f) {
  RunConfig rc;
  if (!f.config.empty()) load_config_file(rc, f.config);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_config_value(rc, s.substr(0, eq), s.substr(eq + 1));
  }
  auto set = [&](const std::string& key, const std::string& value) { set_config_value(rc, key, value); };
  if (f.lambda) set("train.lambda", detail::fmt(*f.lambda));
  if (f.alpha) set("schedule.alpha", detail::fmt(*f.alpha));
  if (f.beta) set("schedule.beta", detail::fmt(*f.beta));
  if (f.mu) set("schedule.mu", detail::fmt(*f.mu));
  if (f.steps) set("train.steps", std::to_string(*f.steps));
  if (f.seed) set("train.seed", std::to_string(*f.seed));
  if (f.no_ecm) set("train.ecm", "false");
  if (f.no_ss) set("train.ss", "false");
  if (f.standard_decoder) set("train.tssa", "false");
  if (!f.src.empty()) set("train.src", f.src);
  if (!f.tgt.empty()) set("train.tgt", f.tgt);
  if (!f.valid_src.empty()) set("train.valid_src", f.valid_src);
  if (!f.valid_tgt.empty()) set("train.valid_tgt", f.valid_tgt);
  if (f.no_timing) rc.train.record_timing = false;

  if (!rc.train.enable_ss && rc.explicit_keys.count("schedule.alpha"))
    warn("scheduled sampling is disabled; the explicit schedule.alpha has no effect");
  if (!rc.train.enable_tssa && rc.train.enable_ecm)
    throw ConfigError("--standard-decoder has no correction stream; combine it with --no-ecm");
  rc.train.validate();
  rc.decode.validate();
  return rc;
}

void check_lengths(const ParallelText& text, std::size_t max_len, const std::string& what) {
  for (std::size_t i = 0; i < text.source.size(); ++i)
    if (text.source[i].size() > max_len || text.target[i].size() > max_len)
      throw DataError(what + " line " + std::to_string(i + 1) + " exceeds the maximum sentence length of " +
                      std::to_string(max_len) + " tokens");
}

TrainSummary run_training(const RunConfig& rc, const fs::path& out_dir, bool resume, const std::string& tag) {
  if (rc.train_src.empty() || rc.train_tgt.empty())
    throw ConfigError("training corpus not set (train.src / train.tgt or --src / --tgt)");
  const auto text = read_parallel(rc.train_src, rc.train_tgt);
  if (text.source.empty()) throw DataError("training corpus " + rc.train_src + " is empty");
  check_lengths(text, rc.max_sentence_length, rc.train_src);
  ParallelText valid_text;
  if (!rc.valid_src.empty() && !rc.valid_tgt.empty()) {
    valid_text = read_parallel(rc.valid_src, rc.valid_tgt);
    check_lengths(valid_text, rc.max_sentence_length, rc.valid_src);
  } else {
    warn("no validation corpus given; validating on the training corpus");
    valid_text = text;
  }
  if (valid_text.source.empty()) throw DataError("validation corpus is empty");
  std::size_t longest = 0;
  for (const auto& s : text.target) longest = std::max(longest, s.size());
  for (const auto& s : valid_text.target) longest = std::max(longest, s.size());
  if (rc.model.max_positions < std::max(rc.max_sentence_length, longest) + 1)
    throw ConfigError("model.max_positions (" + std::to_string(rc.model.max_positions) +
                      ") must exceed train.max_sentence_length (" + std::to_string(rc.max_sentence_length) + ")");

  const fs::path last = out_dir / "checkpoint_last.bin";
  Vocabulary src_vocab, tgt_vocab;
  TransformerParams<float> params;
  OptimizerState opt;
  if (resume && fs::exists(last)) {
    auto probe = load_checkpoint<float>(last.string());
    const auto mc = rc.model_for(probe.src_vocab.size(), probe.tgt_vocab.size());
    auto ck = load_checkpoint<float>(last.string(), &mc);
    if (!ck.has_optimizer) throw CheckpointError(last.string() + " has no optimizer state to resume from");
    params = std::move(ck.params);
    params.config = mc;
    opt = std::move(ck.optimizer);
    src_vocab = std::move(ck.src_vocab);
    tgt_vocab = std::move(ck.tgt_vocab);
    log_line(tag + "resuming from " + last.string() + " at step " + std::to_string(opt.step));
  } else {
    if (resume) warn("no checkpoint at " + last.string() + "; starting from scratch");
    src_vocab = Vocabulary::build(text.source, rc.max_vocab, rc.min_count);
    tgt_vocab = Vocabulary::build(text.target, rc.max_vocab, rc.min_count);
    params = TransformerParams<float>::init(rc.model_for(src_vocab.size(), tgt_vocab.size()), rc.train.seed);
  }
  src_vocab.save((out_dir / "vocab.src").string());
  tgt_vocab.save((out_dir / "vocab.tgt").string());
  const auto train_pairs = encode_pairs(text, src_vocab, tgt_vocab);
  const auto valid_pairs = encode_pairs(valid_text, src_vocab, tgt_vocab);

  TrainOutputs io;
  io.out_dir = out_dir.string();
  io.src_vocab = &src_vocab;
  io.tgt_vocab = &tgt_vocab;
  io.meta["config_hash"] = config_hash(rc);
  io.meta["seed"] = std::to_string(rc.train.seed);
  io.log = [tag](const std::string& m) { log_line(tag + m); };
  log_line(tag + "parameters: " + std::to_string(params.parameter_count()) + ", train pairs: " +
           std::to_string(train_pairs.size()) + ", config hash " + config_hash(rc));
  return train(params, opt, train_pairs, valid_pairs, rc.train, io);
}

// ---- helpers for translate / diagnose ----

Checkpoint<float> open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint " + path + " does not exist");
  return load_checkpoint<float>(path);
}

std::vector<int> encode_source_line(const Vocabulary& v, const std::vector<std::string>& toks, std::size_t max_pos,
                                    std::size_t line) {
  if (toks.empty()) return {kUnkId};
  if (toks.size() > max_pos)
    throw LengthError("input line " + std::to_string(line) + " has " + std::to_string(toks.size()) +
                      " tokens, more than the model's " + std::to_string(max_pos) + " positions");
  return v.encode(toks);
}

std::vector<double> parse_values(const std::vector<std::string>& raw, const std::string& what) {
  std::vector<double> out;
  for (const auto& item : raw) {
    std::stringstream ss(item);
    for (std::string tok; std::getline(ss, tok, ',');) {
      if (tok.empty()) continue;
      try {
        std::size_t used = 0;
        out.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw UsageError(what + ": cannot parse value '" + tok + "'");
      }
    }
  }
  if (out.empty()) throw UsageError(what + ": no values given");
  return out;
}

std::vector<std::string> reconstruct_args(int argc, char** argv) {
  std::vector<std::string> a;
  for (int i = 1; i < argc; ++i) a.emplace_back(argv[i]);
  return a;
}

int run_cli(const std::vector<std::string>& args);

int dispatch(CLI::App& app, const std::vector<std::string>& args) {
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  return -1;
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"tsnmt: toy-scale translation with a two-stream correcting decoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", TSNMT_VERSION);
  std::function<int()> action;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic parallel corpus");
  std::string synth_task = "lexicon", synth_out;
  std::size_t synth_vocab = 50, synth_len = 12, synth_pairs = 10000, synth_valid = 500, synth_test = 500;
  std::uint64_t synth_seed = 1;
  double synth_noise = 0.2;
  synth->add_option("--task", synth_task, "lexicon, reversal or noisy_lexicon")->capture_default_str();
  synth->add_option("--vocab-size", synth_vocab, "Distinct words per language")->capture_default_str();
  synth->add_option("--max-len", synth_len, "Maximum sentence length")->capture_default_str();
  synth->add_option("--pairs", synth_pairs, "Training pairs")->capture_default_str();
  synth->add_option("--valid-pairs", synth_valid, "Validation pairs")->capture_default_str();
  synth->add_option("--test-pairs", synth_test, "Test pairs")->capture_default_str();
  synth->add_option("--noise", synth_noise, "Source replacement rate for noisy_lexicon")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->callback([&] {
    action = [&] {
      if (synth_pairs == 0) throw UsageError("--pairs must be >= 1");
      SyntheticSpec spec;
      spec.kind = parse_synthetic_task(synth_task);
      spec.vocab_size = synth_vocab;
      spec.max_len = synth_len;
      spec.num_pairs = synth_pairs + synth_valid + synth_test;
      spec.seed = synth_seed;
      spec.noise = synth_noise;
      const fs::path out(synth_out);
      fs::create_directories(out);
      write_manifest(out / "manifest.txt", "synth", args, synth_seed, out,
                     {{"task", synth_task}, {"vocab_size", std::to_string(synth_vocab)},
                      {"max_len", std::to_string(synth_len)}, {"pairs", std::to_string(synth_pairs)},
                      {"valid_pairs", std::to_string(synth_valid)}, {"test_pairs", std::to_string(synth_test)},
                      {"noise", fmt_num(synth_noise)}, {"seed", std::to_string(synth_seed)}});
      const auto all = generate_synthetic_task(spec);
      auto slice = [&](std::size_t from, std::size_t n, const std::string& name) {
        TokenizedText s(all.source.begin() + static_cast<std::ptrdiff_t>(from),
                        all.source.begin() + static_cast<std::ptrdiff_t>(from + n));
        TokenizedText t(all.target.begin() + static_cast<std::ptrdiff_t>(from),
                        all.target.begin() + static_cast<std::ptrdiff_t>(from + n));
        write_tokenized((out / (name + ".src")).string(), s);
        write_tokenized((out / (name + ".tgt")).string(), t);
      };
      slice(0, synth_pairs, "train");
      if (synth_valid) slice(synth_pairs, synth_valid, "valid");
      if (synth_test) slice(synth_pairs + synth_valid, synth_test, "test");
      std::cout << "wrote " << synth_pairs << " training pairs to " << out.string() << "\n";
      return 0;
    };
  });

  // train
  auto* trn = app.add_subcommand("train", "Train a model");
  TrainFlags tf;
  std::string train_out;
  add_train_flags(trn, tf);
  trn->add_option("--out", train_out, "Output directory")->required();
  trn->add_flag("--resume", tf.resume, "Continue from <out>/checkpoint_last.bin");
  trn->callback([&] {
    action = [&] {
      const auto rc = resolve_train_config(tf);
      const fs::path out(train_out);
      fs::create_directories(out);
      write_manifest(out / "manifest.txt", "train", args, rc.train.seed, out, resolved_pairs(rc));
      const auto s = run_training(rc, out, tf.resume, "");
      std::printf("steps %llu-%llu  train_nll %.4f  valid_nll %.4f  valid_acc %.4f  %.1fs\n",
                  static_cast<unsigned long long>(s.first_step), static_cast<unsigned long long>(s.last_step),
                  s.final_train_nll, s.last_valid.nll, s.last_valid.accuracy, s.seconds);
      return 0;
    };
  });

  // translate
  auto* tr = app.add_subcommand("translate", "Translate one sentence per line");
  std::string tr_ckpt, tr_in, tr_out, tr_outdir, tr_preset = "iwslt";
  std::optional<std::size_t> tr_beam, tr_maxlen;
  std::optional<double> tr_lp;
  std::size_t tr_nbest = 0;
  bool tr_greedy = false;
  std::uint64_t tr_seed = 1;
  tr->add_option("--checkpoint", tr_ckpt, "Checkpoint file")->required();
  tr->add_option("--input", tr_in, "Source sentences")->required();
  tr->add_option("--output", tr_out, "Hypotheses")->required();
  tr->add_option("--preset", tr_preset, "Decoding preset: iwslt (beam 5, lp 1.0) or wmt (beam 4, lp 0.6)")
      ->capture_default_str();
  tr->add_option("--beam", tr_beam, "Beam size");
  tr->add_option("--length-penalty", tr_lp, "Length penalty exponent");
  tr->add_option("--max-len", tr_maxlen, "Maximum output length");
  tr->add_option("--nbest", tr_nbest, "Write the N best hypotheses as 'index ||| hypothesis ||| score'");
  tr->add_flag("--greedy", tr_greedy, "Greedy decoding");
  tr->add_option("--seed", tr_seed, "Recorded in the manifest; decoding is deterministic");
  tr->add_option("--out", tr_outdir, "Directory for translate.manifest.txt (default: next to --output)");
  tr->callback([&] {
    action = [&] {
      DecodeConfig dc;
      if (tr_preset == "wmt") dc = DecodeConfig::wmt();
      else if (tr_preset != "iwslt") throw UsageError("--preset must be iwslt or wmt");
      if (tr_beam) dc.beam_size = *tr_beam;
      if (tr_lp) dc.length_penalty = *tr_lp;
      if (tr_maxlen) dc.max_output_length = *tr_maxlen;
      if (tr_greedy) dc.mode = DecodeMode::greedy;
      if (tr_nbest) {
        if (tr_greedy) throw UsageError("--nbest needs beam search");
        dc.nbest = tr_nbest;
      }
      dc.validate();
      const fs::path outdir = tr_outdir.empty() ? fs::absolute(tr_out).parent_path() : fs::path(tr_outdir);
      write_manifest(outdir / "translate.manifest.txt", "translate", args, tr_seed, outdir,
                     {{"checkpoint", tr_ckpt}, {"input", tr_in}, {"output", tr_out},
                      {"beam", std::to_string(dc.beam_size)}, {"length_penalty", fmt_num(dc.length_penalty)},
                      {"max_len", std::to_string(dc.max_output_length)}, {"mode", to_string(dc.mode)},
                      {"nbest", std::to_string(tr_nbest)}});
      const auto ck = open_checkpoint(tr_ckpt);
      const auto input = read_tokenized(tr_in);
      std::ofstream out(tr_out, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot write " + tr_out);
      for (std::size_t i = 0; i < input.size(); ++i) {
        const auto src = encode_source_line(ck.src_vocab, input[i], ck.params.config.max_positions, i + 1);
        if (tr_nbest) {
          for (const auto& h : beam_search(ck.params, std::span<const int>(src), dc)) {
            auto toks = h.tokens;
            if (!toks.empty() && toks.back() == kEosId) toks.pop_back();
            out << i << " ||| " << join_tokens(ck.tgt_vocab.decode(toks)) << " ||| " << fmt_num(h.score) << '\n';
          }
        } else {
          out << join_tokens(ck.tgt_vocab.decode(translate_ids(ck.params, std::span<const int>(src), dc))) << '\n';
        }
      }
      if (!out) throw DataError("failed writing " + tr_out);
      return 0;
    };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Score hypotheses against references");
  std::string ev_hyp, ev_ref, ev_report, ev_outdir;
  std::uint64_t ev_seed = 1;
  ev->add_option("--hyp", ev_hyp, "Hypothesis file")->required();
  ev->add_option("--ref", ev_ref, "Reference file")->required();
  ev->add_option("--report", ev_report, "Write a key: value report here");
  ev->add_option("--seed", ev_seed, "Recorded in the manifest");
  ev->add_option("--out", ev_outdir, "Directory for eval.manifest.txt (default: next to --hyp)");
  ev->callback([&] {
    action = [&] {
      const fs::path outdir = ev_outdir.empty() ? fs::absolute(ev_hyp).parent_path() : fs::path(ev_outdir);
      write_manifest(outdir / "eval.manifest.txt", "eval", args, ev_seed, outdir,
                     {{"hyp", ev_hyp}, {"ref", ev_ref}, {"report", ev_report}});
      const auto hyp = read_tokenized(ev_hyp), ref = read_tokenized(ev_ref);
      const auto bleu = corpus_bleu(hyp, ref);
      const double seq = sequence_accuracy(hyp, ref);
      std::printf("%s, seq_acc=%.4f, sentences=%zu\n", bleu.summary().c_str(), seq, hyp.size());
      if (!ev_report.empty()) {
        std::ofstream r(ev_report);
        if (!r) throw DataError("cannot write " + ev_report);
        char buf[64];
        auto num = [&](double v) {
          std::snprintf(buf, sizeof buf, "%.6f", v);
          return std::string(buf);
        };
        r << "bleu: " << num(bleu.bleu) << '\n';
        for (int n = 0; n < 4; ++n) {
          r << "precision_" << n + 1 << ": " << num(bleu.precisions[n]) << '\n';
          r << "matches_" << n + 1 << ": " << bleu.matches[n] << '\n';
          r << "totals_" << n + 1 << ": " << bleu.totals[n] << '\n';
        }
        r << "brevity_penalty: " << num(bleu.brevity_penalty) << '\n';
        r << "hyp_length: " << bleu.hyp_length << '\n';
        r << "ref_length: " << bleu.ref_length << '\n';
        r << "sequence_accuracy: " << num(seq) << '\n';
        r << "sentences: " << hyp.size() << '\n';
      }
      return 0;
    };
  });

  // diagnose
  auto* dg = app.add_subcommand("diagnose", "Content-stream correction diagnostics on injected corruptions");
  std::string dg_ckpt, dg_cmp, dg_src, dg_ref, dg_out;
  std::vector<std::string> dg_rates_raw{"0.15"};
  std::uint64_t dg_seed = 1;
  dg->add_option("--checkpoint", dg_ckpt, "Checkpoint to diagnose")->required();
  dg->add_option("--compare", dg_cmp, "Second checkpoint, scored on identical corruptions");
  dg->add_option("--src", dg_src, "Source sentences")->required();
  dg->add_option("--ref", dg_ref, "Reference translations")->required();
  dg->add_option("--rates", dg_rates_raw, "Corruption rates (comma separated)")->capture_default_str();
  dg->add_option("--seed", dg_seed, "Corruption seed")->capture_default_str();
  dg->add_option("--out", dg_out, "Output directory")->required();
  dg->callback([&] {
    action = [&] {
      const auto rates = parse_values(dg_rates_raw, "--rates");
      const fs::path out(dg_out);
      fs::create_directories(out);
      std::string rate_text;
      for (double r : rates) rate_text += (rate_text.empty() ? "" : ",") + fmt_num(r);
      write_manifest(out / "diagnose.manifest.txt", "diagnose", args, dg_seed, out,
                     {{"checkpoint", dg_ckpt}, {"compare", dg_cmp}, {"src", dg_src}, {"ref", dg_ref},
                      {"rates", rate_text}, {"seed", std::to_string(dg_seed)}});
      const auto text = read_parallel(dg_src, dg_ref);
      std::vector<Checkpoint<float>> models;
      models.push_back(open_checkpoint(dg_ckpt));
      if (!dg_cmp.empty()) models.push_back(open_checkpoint(dg_cmp));
      if (models.size() == 2 && !(models[0].tgt_vocab == models[1].tgt_vocab && models[0].src_vocab == models[1].src_vocab))
        throw DataError("--compare checkpoint uses different vocabularies");
      const auto pairs = encode_pairs(text, models[0].src_vocab, models[0].tgt_vocab);
      std::vector<std::vector<CorrectionResult>> runs(models.size());
      for (double rate : rates) {
        Rng rng(mix_seed(dg_seed, static_cast<std::uint64_t>(rate * 1e6)));
        for (const auto& p : pairs) {
          const auto corrupted = corrupt_target(p.y, rate, models[0].tgt_vocab.size(), rng);
          for (std::size_t m = 0; m < models.size(); ++m) {
            auto r = correction_diagnostic(models[m].params, std::span<const int>(p.x), std::span<const int>(p.y),
                                           std::span<const int>(corrupted));
            r.corruption_rate = rate;
            runs[m].push_back(std::move(r));
          }
        }
      }
      std::ofstream rep(out / "diagnostics.txt");
      auto emit = [&](const std::string& key, const std::string& value) { rep << key << ": " << value << '\n'; };
      std::vector<RecoverySummary> sums;
      for (std::size_t m = 0; m < models.size(); ++m) {
        sums.push_back(recovery_rate(runs[m]));
        const auto& s = sums.back();
        const std::string pre = m == 0 ? "model" : "compare";
        emit(pre + ".recovery_rate", fmt_num(s.rate()));
        emit(pre + ".corrupted_positions", std::to_string(s.corrupted));
        emit(pre + ".vacuous_runs", std::to_string(s.vacuous_runs));
        for (const auto& b : s.buckets)
          emit(pre + ".recovery_rate@" + fmt_num(b.corruption_rate), fmt_num(b.rate()) + " (" +
                                                                         std::to_string(b.recovered) + "/" +
                                                                         std::to_string(b.corrupted) + ")");
      }
      std::printf("recovery_rate=%.4f corrupted=%zu", sums[0].rate(), sums[0].corrupted);
      if (models.size() == 2) {
        const auto paired = compare_recovery(runs[0], runs[1]);
        emit("paired.difference", fmt_num(paired.difference()));
        emit("paired.only_model", std::to_string(paired.only_a));
        emit("paired.only_compare", std::to_string(paired.only_b));
        std::printf(" compare_recovery_rate=%.4f difference=%.4f", sums[1].rate(), paired.difference());
      }
      std::printf("\n");
      return 0;
    };
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full training objective (f64)");
  ToyGradCheckConfig gcc;
  std::string gc_out;
  gc->add_option("--layers", gcc.layers, "Layers")->capture_default_str();
  gc->add_option("--hidden", gcc.hidden, "Hidden size")->capture_default_str();
  gc->add_option("--heads", gcc.heads, "Attention heads")->capture_default_str();
  gc->add_option("--vocab", gcc.vocab, "Vocabulary size (including 4 reserved ids)")->capture_default_str();
  gc->add_option("--seed", gcc.seed, "Random seed")->capture_default_str();
  gc->add_option("--tolerance", gcc.tolerance, "Maximum relative error")->capture_default_str();
  gc->add_option("--step", gcc.step, "Central-difference half width")->capture_default_str();
  gc->add_option("--out", gc_out, "Directory for gradcheck.manifest.txt (default: current directory)");
  gc->callback([&] {
    action = [&] {
      const fs::path out = gc_out.empty() ? fs::current_path() : fs::path(gc_out);
      write_manifest(out / "gradcheck.manifest.txt", "gradcheck", args, gcc.seed, out,
                     {{"layers", std::to_string(gcc.layers)}, {"hidden", std::to_string(gcc.hidden)},
                      {"heads", std::to_string(gcc.heads)}, {"vocab", std::to_string(gcc.vocab)},
                      {"seed", std::to_string(gcc.seed)}, {"tolerance", fmt_num(gcc.tolerance)},
                      {"step", fmt_num(gcc.step)}});
      if (gcc.vocab < kNumReserved + 2) throw UsageError("--vocab must be >= 6");
      if (gcc.heads == 0 || gcc.hidden % gcc.heads) throw UsageError("--hidden must be divisible by --heads");
      const auto report = run_model_gradcheck(gcc);
      std::cout << report.to_string();
      return report.passed ? 0 : 2;
    };
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "One training run per value of lambda, alpha or beta");
  TrainFlags sf;
  std::string sw_param, sw_out;
  std::vector<std::string> sw_values_raw;
  std::size_t sw_jobs = 1;
  add_train_flags(sw, sf);
  sw->add_option("--param", sw_param, "lambda, alpha or beta")->required();
  sw->add_option("--values", sw_values_raw, "Values (comma or space separated)")->required();
  sw->add_option("--base-config", sf.config, "Base configuration file");
  sw->add_option("--out", sw_out, "Output directory")->required();
  sw->add_option("--jobs", sw_jobs, "Concurrent runs")->capture_default_str();
  sw->callback([&] {
    action = [&] {
      if (sw_param != "lambda" && sw_param != "alpha" && sw_param != "beta")
        throw UsageError("--param must be lambda, alpha or beta");
      if (sw_jobs == 0) throw UsageError("--jobs must be >= 1");
      auto raw = parse_values(sw_values_raw, "--values");
      std::vector<double> values;
      for (double v : raw) {
        if (std::find(values.begin(), values.end(), v) != values.end()) {
          warn("duplicate sweep value " + fmt_num(v) + " collapsed");
          continue;
        }
        values.push_back(v);
      }
      const auto base = resolve_train_config(sf);
      const std::string key = sw_param == "lambda" ? "train.lambda" : "schedule." + sw_param;
      std::vector<RunConfig> configs;
      for (double v : values) {
        RunConfig rc = base;
        set_config_value(rc, key, fmt_num(v));
        rc.train.validate();
        configs.push_back(rc);
      }
      const fs::path out(sw_out);
      fs::create_directories(out);
      auto resolved = resolved_pairs(base);
      std::string vtext;
      for (double v : values) vtext += (vtext.empty() ? "" : ",") + fmt_num(v);
      resolved.emplace_back("sweep.param", sw_param);
      resolved.emplace_back("sweep.values", vtext);
      write_manifest(out / "manifest.txt", "sweep", args, base.train.seed, out, resolved);

      std::vector<TrainSummary> results(values.size());
      std::vector<std::string> errors(values.size());
      std::size_t next = 0;
      std::mutex m;
      auto worker = [&] {
        while (true) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(m);
            if (next >= values.size()) return;
            i = next++;
          }
          const fs::path dir = out / (sw_param + "_" + fmt_num(values[i]));
          try {
            fs::create_directories(dir);
            write_manifest(dir / "manifest.txt", "train", args, configs[i].train.seed, dir,
                           resolved_pairs(configs[i]));
            results[i] = run_training(configs[i], dir, false, "[" + sw_param + "=" + fmt_num(values[i]) + "] ");
          } catch (const std::exception& e) {
            errors[i] = e.what();
          }
        }
      };
      std::vector<std::thread> pool;
      for (std::size_t j = 0; j < std::min(sw_jobs, values.size()); ++j) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
      for (std::size_t i = 0; i < values.size(); ++i)
        if (!errors[i].empty()) throw std::runtime_error("sweep run " + fmt_num(values[i]) + " failed: " + errors[i]);

      std::ofstream csv(out / "sweep.csv");
      csv << "param,value,steps,final_train_nll,final_valid_nll,final_valid_accuracy,best_valid_nll,min_p_keep,max_ecm\n";
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& r = results[i];
        double min_p = 1.0, max_ecm = 0.0;
        for (const auto& row : r.rows) {
          min_p = std::min(min_p, row.p_keep);
          max_ecm = std::max(max_ecm, row.ecm);
        }
        if (min_p < configs[i].train.schedule.beta)
          throw std::runtime_error("logged keep probability fell below beta in run " + fmt_num(values[i]));
        char line[512];
        std::snprintf(line, sizeof line, "%s,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.9g,%.9g\n", sw_param.c_str(),
                      fmt_num(values[i]).c_str(), static_cast<unsigned long long>(r.last_step), r.final_train_nll,
                      r.last_valid.nll, r.last_valid.accuracy, r.best_valid_nll, min_p, max_ecm);
        csv << line;
      }
      std::cout << "wrote " << (out / "sweep.csv").string() << " (" << values.size() << " runs)\n";
      return 0;
    };
  });

  // rerun
  auto* rr = app.add_subcommand("rerun", "Replay the invocation recorded in a manifest");
  std::string rr_manifest;
  rr->add_option("manifest", rr_manifest, "manifest file")->required();
  rr->callback([&] {
    action = [&] {
      std::ifstream in(rr_manifest);
      if (!in) throw UsageError("cannot read " + rr_manifest);
      std::vector<std::string> replay;
      for (std::string line; std::getline(in, line);)
        if (line.rfind("arg: ", 0) == 0) replay.push_back(line.substr(5));
      if (replay.empty() || replay.front() == "rerun") throw UsageError(rr_manifest + " records no replayable command");
      return run_cli(replay);
    };
  });

  const int parsed = dispatch(app, args);
  if (parsed >= 0) return parsed;
  try {
    return action();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) { return run_cli(reconstruct_args(argc, argv)); }
