#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperrag/reranker.hpp"

namespace hyperrag {

using Bytes = std::vector<std::uint8_t>;

enum class QuantScheme : std::uint8_t {
  kF32 = 0,
  kInt8PerChannel = 2,
  kInt4PerChannel = 3,
};

std::string_view to_string(QuantScheme scheme);
QuantScheme parse_quant_scheme(std::string_view s);  // "f32" | "int8" | "int4"

// Largest code magnitude: 127 for int8, 7 for int4.
int quant_levels(QuantScheme scheme);

// Size of one code block for `elements` values (int4 packs two per byte).
std::size_t code_bytes(QuantScheme scheme, std::size_t elements);

// Symmetric per-(head, channel) codes for a [heads x tokens x channels]
// tensor. Scales are indexed [head * channels + channel].
struct QuantizedTensor {
  Bytes codes;
  std::vector<float> scales;
};

QuantizedTensor quantize_tensor(std::span<const float> tensor, std::size_t heads, std::size_t tokens,
                                std::size_t channels, QuantScheme scheme);

std::vector<float> dequantize_tensor(std::span<const std::uint8_t> codes, std::span<const float> scales,
                                     std::size_t heads, std::size_t tokens, std::size_t channels,
                                     QuantScheme scheme);

inline constexpr std::uint16_t kHrkvVersion = 1;

struct KVEntryHeader {
  std::uint16_t version = kHrkvVersion;
  QuantScheme scheme = QuantScheme::kF32;
  std::uint16_t layers = 0;
  std::uint16_t kv_heads = 0;
  std::uint16_t document_len = 0;
  std::uint16_t head_dim = 0;
  std::uint16_t valid_len = 0;
  std::string chunk_id;

  std::size_t header_bytes() const { return 19 + chunk_id.size(); }
  std::size_t scale_bytes() const;
  std::size_t payload_bytes() const;
  std::size_t total_bytes() const { return header_bytes() + scale_bytes() + payload_bytes(); }
};

// HRKV entry: header, per-layer K then V scales (quantized schemes only),
// then codes in [layer][K|V][kv_head][token][channel] order. Little-endian.
Bytes encode_entry(const DocKV& doc_kv, QuantScheme scheme);

// Parses the header only; throws kFormat on bad magic/version, kDecode on truncation.
KVEntryHeader read_entry_header(std::span<const std::uint8_t> bytes);

// Decodes and dequantizes to a float32 DocKV.
DocKV decode_entry(std::span<const std::uint8_t> bytes);

}  // namespace hyperrag
