#pragma once

// Checkpoint file: a text manifest of "key: value" lines terminated by the
// line "end_manifest", followed by raw little-endian array data. See
// docs/checkpoint_format.md.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/data.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/optimizer.hpp"

namespace tsnmt {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "tsnmt-checkpoint";

template <typename S>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? "f32" : "f64";
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw CheckpointError("unknown dtype '" + dtype + "'");
}

template <typename S>
struct Checkpoint {
  TransformerParams<S> params;
  OptimizerState optimizer;
  bool has_optimizer = false;
  Vocabulary src_vocab, tgt_vocab;
  std::map<std::string, std::string> meta;  // free-form run metadata
};

namespace detail {

template <typename T>
void append_le(std::string& out, std::span<const T> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(T));
  std::memcpy(out.data() + start, values.data(), values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < values.size(); ++i)
      std::reverse(out.begin() + static_cast<std::ptrdiff_t>(start + i * sizeof(T)),
                   out.begin() + static_cast<std::ptrdiff_t>(start + (i + 1) * sizeof(T)));
}

template <typename T>
std::vector<T> read_le(const char* bytes, std::size_t count) {
  std::vector<T> out(count);
  std::memcpy(out.data(), bytes, count * sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (auto& x : out) {
      auto* b = reinterpret_cast<unsigned char*>(&x);
      std::reverse(b, b + sizeof(T));
    }
  return out;
}

inline std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

struct ArrayRecord {
  std::string name;
  Shape shape;
  std::string dtype;
  std::uint64_t offset = 0;
  std::uint64_t count = 0;
};

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError("malformed " + what + " '" + s + "'");
  }
}

inline double parse_f64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError("malformed " + what + " '" + s + "'");
  }
}

// Shortest text that reads back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const TransformerParams<S>& params, const OptimizerState* opt,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     const std::map<std::string, std::string>& meta = {}) {
  const auto& c = params.config;
  std::ostringstream m;
  m << kCheckpointMagic << '\n';
  m << "format_version: " << kCheckpointVersion << '\n';
  m << "dtype: " << dtype_name<S>() << '\n';
  m << "model.num_layers: " << c.num_layers << '\n';
  m << "model.num_heads: " << c.num_heads << '\n';
  m << "model.hidden_size: " << c.hidden_size << '\n';
  m << "model.ffn_size: " << c.ffn_size << '\n';
  m << "model.src_vocab_size: " << c.src_vocab_size << '\n';
  m << "model.tgt_vocab_size: " << c.tgt_vocab_size << '\n';
  m << "model.max_positions: " << c.max_positions << '\n';
  m << "model.dropout: " << detail::fmt_double(c.dropout) << '\n';
  m << "model.decoder_mode: " << to_string(c.decoder_mode) << '\n';
  m << "model.share_correction_head: " << (c.share_correction_head ? 1 : 0) << '\n';
  m << "train.has_optimizer: " << (opt ? 1 : 0) << '\n';
  if (opt) {
    m << "train.step: " << opt->step << '\n';
    m << "train.lr: " << detail::fmt_double(opt->lr.peak) << '\n';
    m << "train.warmup: " << opt->lr.warmup_steps << '\n';
    m << "train.total_steps: " << opt->lr.total_steps << '\n';
    m << "train.adam_beta1: " << detail::fmt_double(opt->hyper.beta1) << '\n';
    m << "train.adam_beta2: " << detail::fmt_double(opt->hyper.beta2) << '\n';
    m << "train.adam_eps: " << detail::fmt_double(opt->hyper.eps) << '\n';
  }
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" :\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("metadata key/value not representable: " + k);
    m << "meta." << k << ": " << v << '\n';
  }
  m << "vocab.src: " << join_tokens(src_vocab.regular_tokens()) << '\n';
  m << "vocab.tgt: " << join_tokens(tgt_vocab.regular_tokens()) << '\n';

  std::string data;
  const auto named = params.named_parameters();
  if (opt && (opt->m.size() != named.size() || opt->v.size() != named.size()))
    throw CheckpointError("optimizer state does not match the parameter list");
  auto add = [&](const std::string& name, const Shape& shape, auto span) {
    using T = typename decltype(span)::element_type;
    const std::string dtype = std::is_same_v<std::remove_const_t<T>, float> ? "f32" : "f64";
    m << "array: " << name << ' ' << detail::shape_field(shape) << ' ' << dtype << ' ' << data.size() << ' '
      << span.size() << '\n';
    detail::append_le<std::remove_const_t<T>>(data, span);
  };
  for (const auto& [name, t] : named) add(name, t.shape(), std::span<const S>(t.data()));
  if (opt)
    for (std::size_t i = 0; i < named.size(); ++i) {
      add("adam.m." + named[i].first, named[i].second.shape(), std::span<const double>(opt->m[i]));
      add("adam.v." + named[i].first, named[i].second.shape(), std::span<const double>(opt->v[i]));
    }
  m << "data_bytes: " << data.size() << '\n';
  m << "end_manifest\n";

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    const std::string header = m.str();
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

// Reads a checkpoint. When `expected` is given, every array is checked
// against the shapes that configuration implies and the first mismatch is
// reported by name. Nothing is returned unless the whole file validates.
template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::string end_marker = "end_manifest\n";
  std::size_t pos = 0;
  std::map<std::string, std::string> kv;
  std::vector<detail::ArrayRecord> arrays;
  bool first = true, ended = false;
  while (pos < bytes.size()) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) break;
    const std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (first) {
      if (line != kCheckpointMagic) throw CheckpointError(path + " is not a checkpoint file");
      first = false;
      continue;
    }
    if (line == "end_manifest") {
      ended = true;
      break;
    }
    const auto colon = line.find(": ");
    if (colon == std::string::npos) throw CheckpointError("malformed manifest line '" + line + "'");
    const std::string key = line.substr(0, colon), value = line.substr(colon + 2);
    if (key == "array") {
      const auto f = split_whitespace(value);
      if (f.size() != 5) throw CheckpointError("malformed array record '" + value + "'");
      detail::ArrayRecord a;
      a.name = f[0];
      std::stringstream dims(f[1]);
      for (std::string d; std::getline(dims, d, 'x');) a.shape.push_back(detail::parse_u64(d, "array extent"));
      a.dtype = f[2];
      a.offset = detail::parse_u64(f[3], "array offset");
      a.count = detail::parse_u64(f[4], "array count");
      if (shape_size(a.shape) != a.count) throw CheckpointError("array " + a.name + " count does not match its shape");
      arrays.push_back(std::move(a));
    } else {
      kv[key] = value;
    }
  }
  if (first) throw CheckpointError(path + " is empty");
  if (!ended) throw CheckpointError(path + " is truncated inside the manifest");
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw CheckpointError("checkpoint manifest lacks '" + k + "'");
    return it->second;
  };
  const auto version = detail::parse_u64(get("format_version"), "format_version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  if (get("dtype") != dtype_name<S>())
    throw CheckpointError("checkpoint dtype " + get("dtype") + " does not match requested " + dtype_name<S>());
  const auto data_bytes = detail::parse_u64(get("data_bytes"), "data_bytes");
  const std::size_t available = bytes.size() - pos;
  if (available < data_bytes)
    throw CheckpointError(path + " is truncated: expected " + std::to_string(data_bytes) + " data bytes, found " +
                          std::to_string(available));
  if (available > data_bytes) throw CheckpointError(path + " has trailing bytes after the array data");
  const char* data = bytes.data() + pos;

  ModelConfig cfg;
  cfg.num_layers = detail::parse_u64(get("model.num_layers"), "model.num_layers");
  cfg.num_heads = detail::parse_u64(get("model.num_heads"), "model.num_heads");
  cfg.hidden_size = detail::parse_u64(get("model.hidden_size"), "model.hidden_size");
  cfg.ffn_size = detail::parse_u64(get("model.ffn_size"), "model.ffn_size");
  cfg.src_vocab_size = detail::parse_u64(get("model.src_vocab_size"), "model.src_vocab_size");
  cfg.tgt_vocab_size = detail::parse_u64(get("model.tgt_vocab_size"), "model.tgt_vocab_size");
  cfg.max_positions = detail::parse_u64(get("model.max_positions"), "model.max_positions");
  cfg.dropout = detail::parse_f64(get("model.dropout"), "model.dropout");
  try {
    cfg.decoder_mode = parse_decoder_mode(get("model.decoder_mode"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid model configuration in checkpoint: ") + e.what());
  }
  cfg.share_correction_head = get("model.share_correction_head") == "1";

  const ModelConfig& target = expected ? *expected : cfg;
  Checkpoint<S> ck;
  ck.params = TransformerParams<S>::init(target, 0);
  std::map<std::string, const detail::ArrayRecord*> by_name;
  for (const auto& a : arrays) {
    if (a.offset + a.count * dtype_size(a.dtype) > data_bytes)
      throw CheckpointError("array " + a.name + " extends past the end of the data section");
    by_name[a.name] = &a;
  }
  const auto named = ck.params.named_parameters();
  for (const auto& [name, t] : named) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks array " + name);
    const auto& a = *it->second;
    if (a.shape != t.shape())
      throw CheckpointError("shape mismatch for array " + name + ": checkpoint has " + shape_string(a.shape) +
                            ", configuration expects " + shape_string(t.shape()));
    if (a.dtype != dtype_name<S>()) throw CheckpointError("array " + name + " has dtype " + a.dtype);
    const auto values = detail::read_le<S>(data + a.offset, a.count);
    std::copy(values.begin(), values.end(), t.data().begin());
  }

  ck.has_optimizer = get("train.has_optimizer") == "1";
  if (ck.has_optimizer) {
    ck.optimizer.step = detail::parse_u64(get("train.step"), "train.step");
    ck.optimizer.lr.peak = detail::parse_f64(get("train.lr"), "train.lr");
    ck.optimizer.lr.warmup_steps = detail::parse_u64(get("train.warmup"), "train.warmup");
    ck.optimizer.lr.total_steps = detail::parse_u64(get("train.total_steps"), "train.total_steps");
    ck.optimizer.hyper.beta1 = detail::parse_f64(get("train.adam_beta1"), "train.adam_beta1");
    ck.optimizer.hyper.beta2 = detail::parse_f64(get("train.adam_beta2"), "train.adam_beta2");
    ck.optimizer.hyper.eps = detail::parse_f64(get("train.adam_eps"), "train.adam_eps");
    for (const auto& [name, t] : named)
      for (const char* which : {"adam.m.", "adam.v."}) {
        auto it = by_name.find(which + name);
        if (it == by_name.end()) throw CheckpointError("checkpoint lacks array " + std::string(which) + name);
        const auto& a = *it->second;
        if (a.shape != t.shape())
          throw CheckpointError("shape mismatch for array " + a.name + ": checkpoint has " + shape_string(a.shape) +
                                ", configuration expects " + shape_string(t.shape()));
        if (a.dtype != "f64") throw CheckpointError("array " + a.name + " must be f64");
        auto values = detail::read_le<double>(data + a.offset, a.count);
        (which[5] == 'm' ? ck.optimizer.m : ck.optimizer.v).push_back(std::move(values));
      }
  }
  for (const auto& [k, v] : kv)
    if (k.rfind("meta.", 0) == 0) ck.meta[k.substr(5)] = v;
  try {
    ck.src_vocab = Vocabulary::from_tokens(split_whitespace(get("vocab.src")));
    ck.tgt_vocab = Vocabulary::from_tokens(split_whitespace(get("vocab.tgt")));
  } catch (const DataError& e) {
    throw CheckpointError(std::string("invalid vocabulary in checkpoint: ") + e.what());
  }
  if (ck.src_vocab.size() != target.src_vocab_size || ck.tgt_vocab.size() != target.tgt_vocab_size)
    throw CheckpointError("checkpoint vocabulary sizes do not match the model configuration");
  return ck;
}

}  // namespace tsnmt
