#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "tsnmt/errors.hpp"

namespace tsnmt {

// Reserved token ids shared by every vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr std::size_t kNumReserved = 4;

enum class DecoderMode { two_stream, standard };

inline std::string to_string(DecoderMode m) { return m == DecoderMode::two_stream ? "two_stream" : "standard"; }

inline DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "two_stream") return DecoderMode::two_stream;
  if (s == "standard") return DecoderMode::standard;
  throw ConfigError("unknown decoder mode '" + s + "' (expected two_stream or standard)");
}

// Architecture hyperparameters. Defaults follow the IWSLT-sized Transformer.
struct ModelConfig {
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t hidden_size = 512;
  std::size_t ffn_size = 1024;
  std::size_t src_vocab_size = 0;
  std::size_t tgt_vocab_size = 0;
  std::size_t max_positions = 256;
  double dropout = 0.3;
  DecoderMode decoder_mode = DecoderMode::two_stream;
  bool share_correction_head = true;

  std::size_t head_dim() const { return hidden_size / num_heads; }

  void validate() const {
    if (num_layers == 0) throw ConfigError("model.num_layers must be >= 1");
    if (num_heads == 0 || hidden_size == 0 || hidden_size % num_heads != 0)
      throw ConfigError("model.hidden_size (" + std::to_string(hidden_size) + ") must be divisible by model.num_heads (" +
                        std::to_string(num_heads) + ")");
    if (ffn_size == 0) throw ConfigError("model.ffn_size must be >= 1");
    if (src_vocab_size < kNumReserved + 1 || tgt_vocab_size < kNumReserved + 1)
      throw ConfigError("vocabulary sizes must be >= 5");
    if (max_positions < 2) throw ConfigError("model.max_positions must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0,1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace tsnmt
