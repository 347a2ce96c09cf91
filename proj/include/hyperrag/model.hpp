#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hyperrag {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 128;
  std::size_t heads = 8;
  std::size_t kv_heads = 2;
  std::size_t head_dim = 16;
  std::size_t vocab_size = 32768;
  double rope_base = 10000.0;
  std::size_t max_position = 1024;
  std::uint64_t seed = 42;

  std::size_t mlp_dim() const { return 4 * model_dim; }
  std::size_t group_size() const { return heads / kv_heads; }

  // Throws Error(kInvalidConfig) when the GQA shape is inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;  // [dim]
  std::vector<float> wq;         // [dim x heads*head_dim]
  std::vector<float> wk;         // [dim x kv_heads*head_dim]
  std::vector<float> wv;         // [dim x kv_heads*head_dim]
  std::vector<float> wo;         // [heads*head_dim x dim]
  std::vector<float> mlp_norm;   // [dim]
  std::vector<float> w_up;       // [dim x 4*dim]
  std::vector<float> w_down;     // [4*dim x dim]

  bool operator==(const LayerWeights&) const = default;
};

// Projection matrices are stored input-major ([in x out], row-major) so a
// linear layer is y[j] = sum_k x[k] * w[k*out + j] with k ascending.
struct Weights {
  ModelConfig config;
  std::vector<float> token_embedding;  // [vocab x dim]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // [dim]
  std::vector<float> score_head;  // [dim]
  // Rotary tables, [max_position x head_dim/2].
  std::vector<float> rope_cos;
  std::vector<float> rope_sin;

  bool operator==(const Weights&) const = default;
};

// Deterministic parameter fill: every tensor draws from its own SplitMix64
// stream seeded with config.seed ^ fnv1a64(tensor name).
Weights init_weights(const ModelConfig& config);

// Per-layer keys/values laid out [kv_heads x token_count x head_dim]. Keys
// already carry the rotary encoding of their absolute positions. Pad tokens
// are stored as zeros and flagged in `valid`.
struct KVTensorSet {
  std::size_t layers = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t token_count = 0;
  std::size_t position_offset = 0;
  std::vector<std::vector<float>> keys;
  std::vector<std::vector<float>> values;
  std::vector<std::uint8_t> valid;

  static KVTensorSet zeros(std::size_t layers, std::size_t kv_heads, std::size_t head_dim,
                           std::size_t token_count, std::size_t position_offset);

  std::size_t elements_per_tensor() const { return kv_heads * token_count * head_dim; }
  std::size_t payload_bytes() const { return layers * 2 * elements_per_tensor() * sizeof(float); }
  std::size_t valid_count() const;
  bool fully_masked() const { return valid_count() == 0; }

  bool operator==(const KVTensorSet&) const = default;
};

// Pad exclusion. An empty `valid` vector means every token is valid. Causal
// masking is always applied on top.
struct AttentionMask {
  std::vector<std::uint8_t> valid;

  static AttentionMask all_valid() { return {}; }
  static AttentionMask from_tokens(std::span<const TokenId> tokens, TokenId pad_id);
};

struct ForwardResult {
  std::vector<float> hidden;  // [tokens x dim], after the final norm; pad rows are zero
  KVTensorSet produced;       // current tokens only
};

// Scalar reference path. Its loop order defines the bit-exact semantics of
// the model; the optimized path reproduces it element for element.
ForwardResult reference_forward(const Weights& weights, std::span<const TokenId> tokens,
                                std::span<const std::size_t> positions, const KVTensorSet* past,
                                const AttentionMask& mask);

struct ForwardOptions {
  int threads = 0;  // 0: OpenMP default
};

// OpenMP-parallel, blocked path.
ForwardResult forward(const Weights& weights, std::span<const TokenId> tokens,
                      std::span<const std::size_t> positions, const KVTensorSet* past,
                      const AttentionMask& mask, const ForwardOptions& options = {});

std::vector<std::size_t> iota_positions(std::size_t start, std::size_t count);

}  // namespace hyperrag
