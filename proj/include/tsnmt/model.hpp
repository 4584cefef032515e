#pragma once

// Transformer encoder plus a decoder that runs either two-stream
// self-attention (content stream over tokens, query stream over positions)
// or the conventional causal stack.
//
// Row conventions for a decoder input z = [bos, ỹ_1, ..., ỹ_{n-1}]:
//   content row t holds token z_t at position t and sees z_{≤t};
//   query row r uses position embedding p_{r+1}, attends content rows ≤ r and
//   predicts target position r+1, i.e. it sees only ỹ_{<r+1}.
// Both streams therefore use the same inclusive row mask j ≤ r; the strict
// "< t" of the query stream is the one-position offset of its target.

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsnmt/config.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/kernels.hpp"
#include "tsnmt/ops.hpp"
#include "tsnmt/random.hpp"
#include "tsnmt/tensor.hpp"

namespace tsnmt {

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
struct AttentionParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename S>
struct FeedForwardParams {
  Tensor<S> w1, b1, w2, b2;
};

template <typename S>
struct NormParams {
  Tensor<S> gain, bias;
};

template <typename S>
struct EncoderLayerParams {
  AttentionParams<S> self_attn;
  NormParams<S> norm1;
  FeedForwardParams<S> ffn;
  NormParams<S> norm2;
};

// One θ_l, read by both the content and the query stream.
template <typename S>
struct DecoderLayerParams {
  AttentionParams<S> self_attn;
  NormParams<S> norm1;
  AttentionParams<S> cross_attn;
  NormParams<S> norm2;
  FeedForwardParams<S> ffn;
  NormParams<S> norm3;
};

template <typename S>
struct TransformerParams {
  ModelConfig config;
  Tensor<S> src_embed, src_pos;
  Tensor<S> tgt_embed, tgt_pos;  // tgt_pos has max_positions + 1 rows
  std::vector<EncoderLayerParams<S>> encoder;
  std::vector<DecoderLayerParams<S>> decoder;
  Tensor<S> out_w, out_b;
  Tensor<S> correction_w, correction_b;  // undefined when the head is shared

  static TransformerParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TransformerParams p;
    p.config = cfg;
    Rng rng(seed);
    const std::size_t d = cfg.hidden_size, f = cfg.ffn_size;
    auto normal = [&](std::size_t rows, std::size_t cols, double stddev) {
      std::vector<S> v(rows * cols);
      for (auto& x : v) x = static_cast<S>(rng.normal(0.0, stddev));
      return Tensor<S>({rows, cols}, std::move(v), true);
    };
    auto xavier = [&](std::size_t rows, std::size_t cols) {
      const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
      std::vector<S> v(rows * cols);
      for (auto& x : v) x = static_cast<S>((2.0 * rng.uniform() - 1.0) * limit);
      return Tensor<S>({rows, cols}, std::move(v), true);
    };
    auto zeros = [](std::size_t n) { return Tensor<S>::zeros({n}, true); };
    auto ones = [](std::size_t n) { return Tensor<S>({n}, std::vector<S>(n, S(1)), true); };
    auto attn = [&]() {
      AttentionParams<S> a;
      a.wq = xavier(d, d), a.bq = zeros(d);
      a.wk = xavier(d, d), a.bk = zeros(d);
      a.wv = xavier(d, d), a.bv = zeros(d);
      a.wo = xavier(d, d), a.bo = zeros(d);
      return a;
    };
    auto norm = [&]() { return NormParams<S>{ones(d), zeros(d)}; };
    auto ffn = [&]() { return FeedForwardParams<S>{xavier(d, f), zeros(f), xavier(f, d), zeros(d)}; };

    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    p.src_embed = normal(cfg.src_vocab_size, d, emb_std);
    p.src_pos = normal(cfg.max_positions, d, emb_std);
    p.tgt_embed = normal(cfg.tgt_vocab_size, d, emb_std);
    p.tgt_pos = normal(cfg.max_positions + 1, d, emb_std);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      EncoderLayerParams<S> e;
      e.self_attn = attn();
      e.norm1 = norm();
      e.ffn = ffn();
      e.norm2 = norm();
      p.encoder.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      DecoderLayerParams<S> dl;
      dl.self_attn = attn();
      dl.norm1 = norm();
      dl.cross_attn = attn();
      dl.norm2 = norm();
      dl.ffn = ffn();
      dl.norm3 = norm();
      p.decoder.push_back(std::move(dl));
    }
    p.out_w = xavier(d, cfg.tgt_vocab_size);
    p.out_b = zeros(cfg.tgt_vocab_size);
    if (!cfg.share_correction_head && cfg.decoder_mode == DecoderMode::two_stream) {
      p.correction_w = xavier(d, cfg.tgt_vocab_size);
      p.correction_b = zeros(cfg.tgt_vocab_size);
    }
    return p;
  }

  // Stable, fully qualified parameter list. Order is part of the checkpoint
  // and optimizer contract.
  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    auto add_attn = [&](const std::string& prefix, const AttentionParams<S>& a) {
      out.emplace_back(prefix + ".wq", a.wq), out.emplace_back(prefix + ".bq", a.bq);
      out.emplace_back(prefix + ".wk", a.wk), out.emplace_back(prefix + ".bk", a.bk);
      out.emplace_back(prefix + ".wv", a.wv), out.emplace_back(prefix + ".bv", a.bv);
      out.emplace_back(prefix + ".wo", a.wo), out.emplace_back(prefix + ".bo", a.bo);
    };
    auto add_norm = [&](const std::string& prefix, const NormParams<S>& n) {
      out.emplace_back(prefix + ".gain", n.gain), out.emplace_back(prefix + ".bias", n.bias);
    };
    auto add_ffn = [&](const std::string& prefix, const FeedForwardParams<S>& f) {
      out.emplace_back(prefix + ".w1", f.w1), out.emplace_back(prefix + ".b1", f.b1);
      out.emplace_back(prefix + ".w2", f.w2), out.emplace_back(prefix + ".b2", f.b2);
    };
    out.emplace_back("src_embed", src_embed);
    out.emplace_back("src_pos", src_pos);
    out.emplace_back("tgt_embed", tgt_embed);
    out.emplace_back("tgt_pos", tgt_pos);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string pre = "encoder." + std::to_string(l);
      add_attn(pre + ".self_attn", encoder[l].self_attn);
      add_norm(pre + ".norm1", encoder[l].norm1);
      add_ffn(pre + ".ffn", encoder[l].ffn);
      add_norm(pre + ".norm2", encoder[l].norm2);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string pre = "decoder." + std::to_string(l);
      add_attn(pre + ".self_attn", decoder[l].self_attn);
      add_norm(pre + ".norm1", decoder[l].norm1);
      add_attn(pre + ".cross_attn", decoder[l].cross_attn);
      add_norm(pre + ".norm2", decoder[l].norm2);
      add_ffn(pre + ".ffn", decoder[l].ffn);
      add_norm(pre + ".norm3", decoder[l].norm3);
    }
    out.emplace_back("out_w", out_w);
    out.emplace_back("out_b", out_b);
    if (correction_w.defined()) {
      out.emplace_back("correction_w", correction_w);
      out.emplace_back("correction_b", correction_b);
    }
    return out;
  }

  // Deep copy with fresh storage.
  TransformerParams clone() const {
    TransformerParams copy = init_like();
    auto src = named_parameters();
    auto dst = copy.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i)
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
    return copy;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }

  // Output head for content-stream (correction) logits.
  const Tensor<S>& correction_weight() const { return correction_w.defined() ? correction_w : out_w; }
  const Tensor<S>& correction_bias() const { return correction_b.defined() ? correction_b : out_b; }

 private:
  TransformerParams init_like() const { return init(config, 0); }
};

// Padded id matrix: `batch` rows of `length` ids, pad id beyond lengths[b].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  static TokenBatch from_sequences(const std::vector<std::vector<int>>& seqs) {
    TokenBatch tb;
    tb.batch = seqs.size();
    for (const auto& s : seqs) tb.length = std::max(tb.length, s.size());
    if (tb.batch == 0 || tb.length == 0) throw LengthError("token batch must contain a non-empty sequence");
    tb.ids.assign(tb.batch * tb.length, kPadId);
    for (std::size_t b = 0; b < tb.batch; ++b) {
      if (seqs[b].empty()) throw LengthError("token batch row " + std::to_string(b) + " is empty");
      std::copy(seqs[b].begin(), seqs[b].end(), tb.ids.begin() + static_cast<std::ptrdiff_t>(b * tb.length));
      tb.lengths.push_back(seqs[b].size());
    }
    return tb;
  }

  static TokenBatch single(std::span<const int> seq) {
    return from_sequences({std::vector<int>(seq.begin(), seq.end())});
  }

  int at(std::size_t b, std::size_t i) const { return ids[b * length + i]; }
  std::span<const int> row(std::size_t b) const { return {ids.data() + b * length, lengths[b]}; }
};

template <typename S>
struct EncoderStates {
  Tensor<S> h;  // [batch*length × d]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> lengths;
};

// Per-layer stream states; entry l is the input to decoder layer l and entry
// num_layers is the final output. query_states is empty for the standard
// decoder.
template <typename S>
struct TwoStreamState {
  std::vector<Tensor<S>> content_states;
  std::vector<Tensor<S>> query_states;
};

template <typename S>
struct DecoderOutput {
  Tensor<S> query_logits;    // [batch*length × V]; row r predicts target r+1
  Tensor<S> content_logits;  // [batch*length × V]; row t re-predicts y_t (undefined if not requested)
  TwoStreamState<S> states;
};

struct DecoderOptions {
  bool content_logits = true;
  // Project keys/values separately for the query stream instead of reusing
  // the content stream's projections (test hook; results are identical).
  bool recompute_query_kv = false;
};

namespace detail {

enum class StreamSite : std::uint64_t { encoder = 1, content = 2, query = 3 };

inline std::uint64_t dropout_site(StreamSite stream, std::size_t layer, std::size_t sub) {
  return (static_cast<std::uint64_t>(stream) << 32) | (static_cast<std::uint64_t>(layer) << 8) | sub;
}

template <typename S>
Tensor<S> residual_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& sub, const NormParams<S>& norm,
                        double rate, std::uint64_t site) {
  return layer_norm(tape, add(tape, x, dropout(tape, sub, rate, site)), norm.gain, norm.bias, S(kLayerNormEps));
}

template <typename S>
Tensor<S> feed_forward(Tape<S>& tape, const Tensor<S>& x, const FeedForwardParams<S>& f) {
  return linear(tape, relu(tape, linear(tape, x, f.w1, f.b1)), f.w2, f.b2);
}

inline std::vector<int> position_ids(std::size_t batch, std::size_t length, std::size_t offset) {
  std::vector<int> pos(batch * length);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < length; ++i) pos[b * length + i] = static_cast<int>(i + offset);
  return pos;
}

}  // namespace detail

// Projects query_in and kv_in, attends under mask, applies the output projection.
template <typename S>
Tensor<S> multi_head_attention(Tape<S>& tape, const AttentionParams<S>& a, const Tensor<S>& query_in,
                               const Tensor<S>& kv_in, const AttentionMask& mask, std::size_t heads) {
  auto q = linear(tape, query_in, a.wq, a.bq);
  auto k = linear(tape, kv_in, a.wk, a.bk);
  auto v = linear(tape, kv_in, a.wv, a.bv);
  return linear(tape, attention(tape, q, k, v, mask, heads), a.wo, a.bo);
}

template <typename S>
EncoderStates<S> encode(Tape<S>& tape, const TransformerParams<S>& p, const TokenBatch& src) {
  const auto& cfg = p.config;
  if (src.length > cfg.max_positions)
    throw LengthError("source length " + std::to_string(src.length) + " exceeds max_positions " +
                      std::to_string(cfg.max_positions));
  const auto pos = detail::position_ids(src.batch, src.length, 0);
  auto x = add(tape, embedding(tape, p.src_embed, std::span<const int>(src.ids)),
               embedding(tape, p.src_pos, std::span<const int>(pos)));
  x = dropout(tape, x, cfg.dropout, detail::dropout_site(detail::StreamSite::encoder, 0, 0));
  const auto mask = AttentionMask::padding(src.length, src.length, src.lengths);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const auto& layer = p.encoder[l];
    auto a = multi_head_attention(tape, layer.self_attn, x, x, mask, cfg.num_heads);
    x = detail::residual_norm(tape, x, a, layer.norm1, cfg.dropout,
                              detail::dropout_site(detail::StreamSite::encoder, l + 1, 0));
    x = detail::residual_norm(tape, x, detail::feed_forward(tape, x, layer.ffn), layer.norm2, cfg.dropout,
                              detail::dropout_site(detail::StreamSite::encoder, l + 1, 1));
  }
  return EncoderStates<S>{x, src.batch, src.length, src.lengths};
}

namespace detail {

template <typename S>
void check_decoder_input(const TransformerParams<S>& p, const TokenBatch& z, const EncoderStates<S>& enc) {
  if (z.length > p.config.max_positions)
    throw LengthError("decoder input length " + std::to_string(z.length) + " exceeds max_positions " +
                      std::to_string(p.config.max_positions));
  if (z.batch != enc.batch)
    throw DimensionError("decoder batch " + std::to_string(z.batch) + " != encoder batch " + std::to_string(enc.batch));
  for (std::size_t b = 0; b < z.batch; ++b)
    if (z.lengths[b] == 0 || z.at(b, 0) != kBosId)
      throw ContractError("decoder input row " + std::to_string(b) + " must begin with the begin-of-sequence token");
}

// Self-attention over (K, V) followed by cross-attention and the FFN; the
// shared per-layer body of both streams.
template <typename S>
Tensor<S> decoder_layer(Tape<S>& tape, const DecoderLayerParams<S>& layer, const ModelConfig& cfg,
                        const Tensor<S>& x, const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& cross_k,
                        const Tensor<S>& cross_v, const AttentionMask& self_mask, const AttentionMask& cross_mask,
                        StreamSite stream, std::size_t l) {
  const auto& sa = layer.self_attn;
  auto a = linear(tape, attention(tape, linear(tape, x, sa.wq, sa.bq), k, v, self_mask, cfg.num_heads), sa.wo, sa.bo);
  auto y = residual_norm(tape, x, a, layer.norm1, cfg.dropout, dropout_site(stream, l + 1, 0));
  const auto& ca = layer.cross_attn;
  auto c = linear(tape, attention(tape, linear(tape, y, ca.wq, ca.bq), cross_k, cross_v, cross_mask, cfg.num_heads),
                  ca.wo, ca.bo);
  y = residual_norm(tape, y, c, layer.norm2, cfg.dropout, dropout_site(stream, l + 1, 1));
  return residual_norm(tape, y, feed_forward(tape, y, layer.ffn), layer.norm3, cfg.dropout,
                       dropout_site(stream, l + 1, 2));
}

template <typename S>
struct CrossKV {
  std::vector<Tensor<S>> k, v;
};

template <typename S>
CrossKV<S> cross_projections(Tape<S>& tape, const TransformerParams<S>& p, const EncoderStates<S>& enc) {
  CrossKV<S> kv;
  for (const auto& layer : p.decoder) {
    kv.k.push_back(linear(tape, enc.h, layer.cross_attn.wk, layer.cross_attn.bk));
    kv.v.push_back(linear(tape, enc.h, layer.cross_attn.wv, layer.cross_attn.bv));
  }
  return kv;
}

}  // namespace detail

// Two-stream decoder forward. All content layers are computed first, then the
// query stream reads the stored per-layer content keys/values.
template <typename S>
DecoderOutput<S> decoder_forward_two_stream(Tape<S>& tape, const TransformerParams<S>& p, const TokenBatch& z,
                                            const EncoderStates<S>& enc, const DecoderOptions& opt = {}) {
  const auto& cfg = p.config;
  if (cfg.decoder_mode != DecoderMode::two_stream)
    throw ContractError("decoder_forward_two_stream called on a standard-decoder model");
  detail::check_decoder_input(p, z, enc);
  const std::size_t layers = p.decoder.size();
  const auto self_mask = AttentionMask::causal(z.length, z.length, z.lengths);
  const auto cross_mask = AttentionMask::padding(z.length, enc.length, enc.lengths);
  const auto cross = detail::cross_projections(tape, p, enc);

  DecoderOutput<S> out;
  const auto cpos = detail::position_ids(z.batch, z.length, 0);
  auto c = add(tape, embedding(tape, p.tgt_embed, std::span<const int>(z.ids)),
               embedding(tape, p.tgt_pos, std::span<const int>(cpos)));
  c = dropout(tape, c, cfg.dropout, detail::dropout_site(detail::StreamSite::content, 0, 0));
  std::vector<Tensor<S>> keys, values;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& sa = p.decoder[l].self_attn;
    out.states.content_states.push_back(c);
    keys.push_back(linear(tape, c, sa.wk, sa.bk));
    values.push_back(linear(tape, c, sa.wv, sa.bv));
    if (l + 1 == layers && !opt.content_logits) break;
    c = detail::decoder_layer(tape, p.decoder[l], cfg, c, keys[l], values[l], cross.k[l], cross.v[l], self_mask,
                              cross_mask, detail::StreamSite::content, l);
  }
  if (opt.content_logits) {
    out.states.content_states.push_back(c);
    out.content_logits = linear(tape, c, p.correction_weight(), p.correction_bias());
  }

  const auto qpos = detail::position_ids(z.batch, z.length, 1);
  auto q = dropout(tape, embedding(tape, p.tgt_pos, std::span<const int>(qpos)), cfg.dropout,
                   detail::dropout_site(detail::StreamSite::query, 0, 0));
  for (std::size_t l = 0; l < layers; ++l) {
    out.states.query_states.push_back(q);
    Tensor<S> k = keys[l], v = values[l];
    if (opt.recompute_query_kv) {
      const auto& sa = p.decoder[l].self_attn;
      k = linear(tape, out.states.content_states[l], sa.wk, sa.bk);
      v = linear(tape, out.states.content_states[l], sa.wv, sa.bv);
    }
    q = detail::decoder_layer(tape, p.decoder[l], cfg, q, k, v, cross.k[l], cross.v[l], self_mask, cross_mask,
                              detail::StreamSite::query, l);
  }
  out.states.query_states.push_back(q);
  out.query_logits = linear(tape, q, p.out_w, p.out_b);
  return out;
}

// Conventional causal decoder (the single content stream predicts the next
// token). Row r of the logits predicts target r+1.
template <typename S>
DecoderOutput<S> decoder_forward_standard(Tape<S>& tape, const TransformerParams<S>& p, const TokenBatch& z,
                                          const EncoderStates<S>& enc) {
  const auto& cfg = p.config;
  detail::check_decoder_input(p, z, enc);
  const auto self_mask = AttentionMask::causal(z.length, z.length, z.lengths);
  const auto cross_mask = AttentionMask::padding(z.length, enc.length, enc.lengths);
  const auto cross = detail::cross_projections(tape, p, enc);
  DecoderOutput<S> out;
  const auto pos = detail::position_ids(z.batch, z.length, 0);
  auto x = add(tape, embedding(tape, p.tgt_embed, std::span<const int>(z.ids)),
               embedding(tape, p.tgt_pos, std::span<const int>(pos)));
  x = dropout(tape, x, cfg.dropout, detail::dropout_site(detail::StreamSite::content, 0, 0));
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& sa = p.decoder[l].self_attn;
    out.states.content_states.push_back(x);
    auto k = linear(tape, x, sa.wk, sa.bk);
    auto v = linear(tape, x, sa.wv, sa.bv);
    x = detail::decoder_layer(tape, p.decoder[l], cfg, x, k, v, cross.k[l], cross.v[l], self_mask, cross_mask,
                              detail::StreamSite::content, l);
  }
  out.states.content_states.push_back(x);
  out.query_logits = linear(tape, x, p.out_w, p.out_b);
  return out;
}

// Dispatches on the configured decoder mode. For the standard decoder only
// query_logits (next-token logits) is populated.
template <typename S>
DecoderOutput<S> decoder_forward(Tape<S>& tape, const TransformerParams<S>& p, const TokenBatch& z,
                                 const EncoderStates<S>& enc, const DecoderOptions& opt = {}) {
  if (p.config.decoder_mode == DecoderMode::two_stream) return decoder_forward_two_stream(tape, p, z, enc, opt);
  return decoder_forward_standard(tape, p, z, enc);
}

// Step-wise decoder with cached content-stream keys/values, for one source
// sentence. push() extends the content stream by one token; next_logits()
// runs the query stream (or, for the standard decoder, reads the newest
// content row) to score the following position. Results are bit-identical to
// the full-sequence forward on the same prefix.
template <typename S>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const TransformerParams<S>& params, std::span<const int> source) : p_(&params) {
    const auto& cfg = params.config;
    Tape<S> tape(0, false, false);
    auto enc = encode(tape, params, TokenBatch::single(source));
    auto cross = std::make_shared<CrossCache>();
    cross->length = enc.length;
    for (const auto& layer : params.decoder) {
      cross->k.push_back(to_vec(linear(tape, enc.h, layer.cross_attn.wk, layer.cross_attn.bk)));
      cross->v.push_back(to_vec(linear(tape, enc.h, layer.cross_attn.wv, layer.cross_attn.bv)));
    }
    cross_ = std::move(cross);
    self_k_.assign(cfg.num_layers, {});
    self_v_.assign(cfg.num_layers, {});
  }

  std::size_t length() const { return length_; }
  const std::vector<int>& tokens() const { return tokens_; }

  void push(int token) {
    const auto& cfg = p_->config;
    const std::size_t d = cfg.hidden_size;
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.tgt_vocab_size)
      throw IndexError("incremental decoder: token " + std::to_string(token) + " out of range");
    if (length_ == 0 && token != kBosId) throw ContractError("first decoder token must be begin-of-sequence");
    if (length_ >= cfg.max_positions) throw LengthError("decoder input exceeds max_positions");
    std::vector<S> x(d);
    const S* e = p_->tgt_embed.ptr() + static_cast<std::size_t>(token) * d;
    const S* pe = p_->tgt_pos.ptr() + length_ * d;
    for (std::size_t c = 0; c < d; ++c) x[c] = e[c] + pe[c];
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const auto& sa = p_->decoder[l].self_attn;
      append(self_k_[l], linear_row(x, sa.wk, sa.bk));
      append(self_v_[l], linear_row(x, sa.wv, sa.bv));
      x = layer_row(l, x, length_ + 1);
    }
    content_out_ = std::move(x);
    tokens_.push_back(token);
    ++length_;
  }

  // Logits for target position length(): the query stream at position
  // p_{length()} attending all pushed content rows.
  std::vector<S> next_logits() const {
    if (length_ == 0) throw ContractError("next_logits() before any token was pushed");
    if (p_->config.decoder_mode == DecoderMode::standard) return linear_row(content_out_, p_->out_w, p_->out_b);
    const std::size_t d = p_->config.hidden_size;
    std::vector<S> q(p_->tgt_pos.ptr() + length_ * d, p_->tgt_pos.ptr() + (length_ + 1) * d);
    for (std::size_t l = 0; l < p_->config.num_layers; ++l) q = layer_row(l, q, length_);
    return linear_row(q, p_->out_w, p_->out_b);
  }

  // Content-stream (correction) logits of the newest pushed token.
  std::vector<S> content_logits() const {
    if (length_ == 0) throw ContractError("content_logits() before any token was pushed");
    return linear_row(content_out_, p_->correction_weight(), p_->correction_bias());
  }

 private:
  struct CrossCache {
    std::size_t length = 0;
    std::vector<std::vector<S>> k, v;
  };

  static std::vector<S> to_vec(const Tensor<S>& t) { return {t.data().begin(), t.data().end()}; }
  static void append(std::vector<S>& cache, const std::vector<S>& row) { cache.insert(cache.end(), row.begin(), row.end()); }

  std::vector<S> linear_row(const std::vector<S>& x, const Tensor<S>& w, const Tensor<S>& b) const {
    const std::size_t n = w.cols();
    std::vector<S> y(n);
    kernels::gemm(x.data(), w.ptr(), y.data(), 1, x.size(), n);
    kernels::add_bias_rows(y.data(), b.ptr(), 1, n);
    return y;
  }

  std::vector<S> norm_row(const std::vector<S>& x, const std::vector<S>& sub, const NormParams<S>& n) const {
    std::vector<S> sum(x.size()), y(x.size());
    for (std::size_t c = 0; c < x.size(); ++c) sum[c] = x[c] + sub[c];
    kernels::layer_norm_row(sum.data(), n.gain.ptr(), n.bias.ptr(), S(kLayerNormEps), y.data(), x.size());
    return y;
  }

  std::vector<S> attend(const std::vector<S>& q, const std::vector<S>& keys, const std::vector<S>& values,
                        std::size_t nkeys) const {
    const auto& cfg = p_->config;
    const std::size_t d = cfg.hidden_size, dh = cfg.head_dim();
    const S scale_factor = S(1) / std::sqrt(static_cast<S>(dh));
    std::vector<S> out(d), probs(nkeys);
    for (std::size_t h = 0; h < cfg.num_heads; ++h)
      kernels::attend_row(q.data() + h * dh, keys.data() + h * dh, values.data() + h * dh, d, nkeys, dh, scale_factor,
                          [](std::size_t) { return true; }, probs.data(), out.data() + h * dh);
    return out;
  }

  // Decoder layer l for a single row attending the first nkeys cached rows.
  std::vector<S> layer_row(std::size_t l, const std::vector<S>& x, std::size_t nkeys) const {
    const auto& layer = p_->decoder[l];
    const auto& sa = layer.self_attn;
    auto a = linear_row(attend(linear_row(x, sa.wq, sa.bq), self_k_[l], self_v_[l], nkeys), sa.wo, sa.bo);
    auto y = norm_row(x, a, layer.norm1);
    const auto& ca = layer.cross_attn;
    auto c = linear_row(attend(linear_row(y, ca.wq, ca.bq), cross_->k[l], cross_->v[l], cross_->length), ca.wo, ca.bo);
    y = norm_row(y, c, layer.norm2);
    auto hidden = linear_row(y, layer.ffn.w1, layer.ffn.b1);
    for (auto& h : hidden) h = h > S(0) ? h : S(0);
    return norm_row(y, linear_row(hidden, layer.ffn.w2, layer.ffn.b2), layer.norm3);
  }

  const TransformerParams<S>* p_;
  std::shared_ptr<const CrossCache> cross_;
  std::vector<std::vector<S>> self_k_, self_v_;
  std::vector<S> content_out_;
  std::vector<int> tokens_;
  std::size_t length_ = 0;
};

}  // namespace tsnmt
