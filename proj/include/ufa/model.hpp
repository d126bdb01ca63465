#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ufa/rng.hpp"
#include "ufa/tensor.hpp"

namespace ufa {

// Rectangular block of token ids, row-major, right-padded with <pad> = 0.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;

  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  bool operator==(const TokenBatch&) const = default;
};

// Packs sequences into a batch padded to the longest row.
TokenBatch pack(const std::vector<std::vector<int>>& rows, int pad_id = 0);

struct ModelConfig {
  std::size_t n_encoder_layers = 8;
  std::size_t n_decoder_layers = 8;
  std::size_t n_heads = 6;
  std::size_t d_model = 512;
  // Per-head width; 0 means d_model / n_heads.
  std::size_t head_dim = 64;
  // 0 means 4 * d_model.
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  std::size_t relpos_buckets = 32;
  std::size_t relpos_max_distance = 128;
  double dropout_rate = 0.1;
  bool tie_embeddings = true;
  std::size_t max_source_length = 512;
  std::size_t max_target_length = 100;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model; }
  std::size_t kv_width() const { return head_dim ? head_dim : d_model / n_heads; }
  // Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
using ParameterMap = std::map<std::string, Tensor<T>>;

// Expected name -> shape table for a configuration.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);
// Closed-form parameter count of the configuration.
std::size_t parameter_count(const ModelConfig& config);

// T5 bucketing of key_pos - query_pos.
int relative_position_bucket(long relative_position, bool bidirectional, std::size_t num_buckets,
                             std::size_t max_distance);

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;       // (B, S, d)
  std::vector<std::uint8_t> key_valid;  // (B, S), 0 at padding
};

// Encoder-decoder transformer with pre-normalized residual blocks, RMS
// normalization, bucketed relative-position attention bias (one table for the
// encoder, one for the decoder self-attention) and an output projection tied
// to the token embedding by default.
template <typename T>
class Transformer {
 public:
  Transformer(const ModelConfig& config, std::uint64_t seed);
  // Adopts externally built parameters; shapes must match the configuration.
  Transformer(const ModelConfig& config, ParameterMap<T> parameters);

  const ModelConfig& config() const { return config_; }
  ParameterMap<T>& parameters() { return params_; }
  const ParameterMap<T>& parameters() const { return params_; }

  // Logits before softmax, (B, T, V). Decoder input is the target shifted
  // right behind a <pad> start token. Dropout runs only when rng is given.
  Tensor<T> forward(const TokenBatch& input, const TokenBatch& target, Rng* rng = nullptr) const;
  // Mean cross entropy over non-<pad> target positions.
  Tensor<T> loss(const TokenBatch& input, const TokenBatch& target, Rng* rng = nullptr) const;

  EncoderOutput<T> encode(const TokenBatch& input, Rng* rng = nullptr) const;
  // Logits for an explicit decoder input, (B, T, V).
  Tensor<T> decode(const EncoderOutput<T>& encoded, const TokenBatch& decoder_input,
                   Rng* rng = nullptr) const;

  template <typename U>
  Transformer<U> cast() const;

 private:
  const Tensor<T>& p(const std::string& name) const;
  Tensor<T> attention(const std::string& prefix, const Tensor<T>& query_in, const Tensor<T>& kv_in,
                      const Tensor<T>* bias, std::span<const std::uint8_t> key_valid, bool causal) const;
  Tensor<T> feed_forward(const std::string& prefix, const Tensor<T>& x, Rng* rng) const;
  Tensor<T> norm(const std::string& name, const Tensor<T>& x) const;
  Tensor<T> position_bias(const std::string& table, std::size_t q_len, std::size_t k_len,
                          bool bidirectional) const;

  ModelConfig config_;
  ParameterMap<T> params_;
};

TokenBatch shift_right(const TokenBatch& target, int start_id = 0);

// Checkpoint file: "UFACKPT1" magic line, a manifest-length line, a UTF-8
// manifest of config fields and `tensor name shape dtype offset` rows, then
// little-endian float32 payloads at the declared offsets.
void save_checkpoint(const std::filesystem::path& path, const Transformer<float>& model);
Transformer<float> load_checkpoint(const std::filesystem::path& path);
// Also checks every tensor against `expected`; a mismatch raises
// CheckpointError naming the tensor and the expected shape.
Transformer<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace ufa
