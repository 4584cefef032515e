#pragma once

// Flat "key = value" run configuration. Keys carry a section prefix
// (model., train., schedule., decode.); '#' starts a comment. Unknown keys
// and malformed values are errors.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/inference.hpp"
#include "tsnmt/schedule.hpp"
#include "tsnmt/training.hpp"

namespace tsnmt {

struct RunConfig {
  ModelConfig model;
  TrainRunConfig train;
  DecodeConfig decode;
  std::string train_src, train_tgt, valid_src, valid_tgt;
  std::size_t max_vocab = 0;  // 0: unbounded
  std::size_t min_count = 1;
  std::size_t max_sentence_length = 128;
  std::set<std::string> explicit_keys;

  // Applies the ablation flags to the model before construction.
  ModelConfig model_for(std::size_t src_vocab, std::size_t tgt_vocab) const {
    ModelConfig m = model;
    m.src_vocab_size = src_vocab;
    m.tgt_vocab_size = tgt_vocab;
    m.decoder_mode = train.decoder_mode();
    return m;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t cfg_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double cfg_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, ConfigKey>& config_keys() {
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    auto size_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& key, const std::string& v) {
                   member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(cfg_u64(key, v));
                 },
                 [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
    };
    auto real_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = cfg_f64(key, v); },
                 [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); }};
    };
    auto bool_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = cfg_bool(key, v); },
                 [member](const RunConfig& c) {
                   return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false");
                 }};
    };
    auto text_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; },
                 [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
    };

    size_key("model.layers", [](RunConfig& c) -> std::size_t& { return c.model.num_layers; });
    size_key("model.heads", [](RunConfig& c) -> std::size_t& { return c.model.num_heads; });
    size_key("model.hidden", [](RunConfig& c) -> std::size_t& { return c.model.hidden_size; });
    size_key("model.ffn", [](RunConfig& c) -> std::size_t& { return c.model.ffn_size; });
    size_key("model.max_positions", [](RunConfig& c) -> std::size_t& { return c.model.max_positions; });
    real_key("model.dropout", [](RunConfig& c) -> double& { return c.model.dropout; });
    bool_key("model.share_correction_head", [](RunConfig& c) -> bool& { return c.model.share_correction_head; });

    size_key("train.steps", [](RunConfig& c) -> std::uint64_t& { return c.train.max_steps; });
    size_key("train.tokens_per_batch", [](RunConfig& c) -> std::size_t& { return c.train.tokens_per_batch; });
    size_key("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
    bool_key("train.ecm", [](RunConfig& c) -> bool& { return c.train.enable_ecm; });
    bool_key("train.ss", [](RunConfig& c) -> bool& { return c.train.enable_ss; });
    bool_key("train.tssa", [](RunConfig& c) -> bool& { return c.train.enable_tssa; });
    real_key("train.lambda", [](RunConfig& c) -> double& { return c.train.weights.lambda; });
    real_key("train.lr", [](RunConfig& c) -> double& { return c.train.lr; });
    size_key("train.warmup", [](RunConfig& c) -> std::uint64_t& { return c.train.warmup; });
    real_key("train.clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; });
    real_key("train.label_smoothing", [](RunConfig& c) -> double& { return c.train.label_smoothing; });
    size_key("train.valid_every", [](RunConfig& c) -> std::uint64_t& { return c.train.valid_every; });
    size_key("train.checkpoint_every", [](RunConfig& c) -> std::uint64_t& { return c.train.checkpoint_every; });
    size_key("train.log_every", [](RunConfig& c) -> std::uint64_t& { return c.train.log_every; });
    real_key("train.stop_at_valid_accuracy", [](RunConfig& c) -> double& { return c.train.stop_at_valid_accuracy; });
    size_key("train.stop_after", [](RunConfig& c) -> std::uint64_t& { return c.train.stop_after; });
    k["train.first_pass"] = {
        [](RunConfig& c, const std::string&, const std::string& v) { c.train.first_pass = parse_first_pass_mode(v); },
        [](const RunConfig& c) { return to_string(c.train.first_pass); }};
    text_key("train.src", [](RunConfig& c) -> std::string& { return c.train_src; });
    text_key("train.tgt", [](RunConfig& c) -> std::string& { return c.train_tgt; });
    text_key("train.valid_src", [](RunConfig& c) -> std::string& { return c.valid_src; });
    text_key("train.valid_tgt", [](RunConfig& c) -> std::string& { return c.valid_tgt; });
    size_key("train.max_vocab", [](RunConfig& c) -> std::size_t& { return c.max_vocab; });
    size_key("train.min_count", [](RunConfig& c) -> std::size_t& { return c.min_count; });
    size_key("train.max_sentence_length", [](RunConfig& c) -> std::size_t& { return c.max_sentence_length; });

    real_key("schedule.alpha", [](RunConfig& c) -> double& { return c.train.schedule.alpha; });
    real_key("schedule.beta", [](RunConfig& c) -> double& { return c.train.schedule.beta; });
    real_key("schedule.mu", [](RunConfig& c) -> double& { return c.train.schedule.mu; });

    size_key("decode.beam", [](RunConfig& c) -> std::size_t& { return c.decode.beam_size; });
    real_key("decode.length_penalty", [](RunConfig& c) -> double& { return c.decode.length_penalty; });
    size_key("decode.max_len", [](RunConfig& c) -> std::size_t& { return c.decode.max_output_length; });
    size_key("decode.nbest", [](RunConfig& c) -> std::size_t& { return c.decode.nbest; });
    k["decode.mode"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.decode.mode = parse_decode_mode(v); },
                        [](const RunConfig& c) { return to_string(c.decode.mode); }};
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second.set(cfg, key, value);
  cfg.explicit_keys.insert(key);
}

inline void parse_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>") {
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value', got '" + line + "'");
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  parse_config_text(cfg, ss.str(), path);
}

// Every key with its resolved value, one "key = value" per line, sorted.
inline std::string resolved_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, k] : detail::config_keys()) out += key + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& cfg) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(resolved_config_text(cfg))));
  return buf;
}

}  // namespace tsnmt
