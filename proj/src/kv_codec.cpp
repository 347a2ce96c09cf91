#include "hyperrag/kv_codec.hpp"

#include <cmath>
#include <limits>

#include "hyperrag/detail/bytes.hpp"
#include "hyperrag/error.hpp"

namespace hyperrag {

namespace {

constexpr std::uint8_t kMagic[4] = {'H', 'R', 'K', 'V'};

bool is_quantized(QuantScheme s) { return s != QuantScheme::kF32; }

QuantScheme scheme_from_code(std::uint8_t code) {
  switch (code) {
    case 0: return QuantScheme::kF32;
    case 2: return QuantScheme::kInt8PerChannel;
    case 3: return QuantScheme::kInt4PerChannel;
    default: throw Error(ErrorCode::kFormat, "unknown quantization scheme code " + std::to_string(code));
  }
}

std::int32_t unpack_code(std::span<const std::uint8_t> codes, std::size_t e, QuantScheme scheme) {
  if (scheme == QuantScheme::kInt8PerChannel) return static_cast<std::int8_t>(codes[e]);
  const std::uint8_t byte = codes[e / 2];
  const std::uint8_t nib = (e % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
  return static_cast<std::int8_t>(static_cast<std::uint8_t>(nib << 4)) >> 4;
}

std::uint16_t checked_u16(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint16_t>::max())
    throw Error(ErrorCode::kEncoding, std::string(what) + " " + std::to_string(v) + " does not fit in u16");
  return static_cast<std::uint16_t>(v);
}

}  // namespace

std::string_view to_string(QuantScheme scheme) {
  switch (scheme) {
    case QuantScheme::kF32: return "f32";
    case QuantScheme::kInt8PerChannel: return "int8";
    case QuantScheme::kInt4PerChannel: return "int4";
  }
  return "unknown";
}

QuantScheme parse_quant_scheme(std::string_view s) {
  if (s == "f32") return QuantScheme::kF32;
  if (s == "int8") return QuantScheme::kInt8PerChannel;
  if (s == "int4") return QuantScheme::kInt4PerChannel;
  throw Error(ErrorCode::kInvalidConfig, "unknown quantization scheme '" + std::string(s) + "'");
}

int quant_levels(QuantScheme scheme) {
  switch (scheme) {
    case QuantScheme::kInt8PerChannel: return 127;
    case QuantScheme::kInt4PerChannel: return 7;
    case QuantScheme::kF32: break;
  }
  throw Error(ErrorCode::kInvalidConfig, "f32 has no quantization levels");
}

std::size_t code_bytes(QuantScheme scheme, std::size_t elements) {
  switch (scheme) {
    case QuantScheme::kF32: return elements * 4;
    case QuantScheme::kInt8PerChannel: return elements;
    case QuantScheme::kInt4PerChannel: return (elements + 1) / 2;
  }
  return 0;
}

QuantizedTensor quantize_tensor(std::span<const float> tensor, std::size_t heads, std::size_t tokens,
                                std::size_t channels, QuantScheme scheme) {
  if (!is_quantized(scheme)) throw Error(ErrorCode::kInvalidConfig, "quantize_tensor needs a quantized scheme");
  if (tensor.size() != heads * tokens * channels) throw Error(ErrorCode::kShape, "tensor size mismatch");
  for (float x : tensor)
    if (!std::isfinite(x)) throw Error(ErrorCode::kEncoding, "non-finite value in KV tensor");

  const int levels = quant_levels(scheme);
  QuantizedTensor q;
  q.scales.assign(heads * channels, 1.0f);
  q.codes.assign(code_bytes(scheme, tensor.size()), 0);

  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t c = 0; c < channels; ++c) {
      float maxabs = 0.0f;
      for (std::size_t t = 0; t < tokens; ++t)
        maxabs = std::max(maxabs, std::fabs(tensor[(h * tokens + t) * channels + c]));
      const float scale = maxabs == 0.0f ? 1.0f : maxabs / static_cast<float>(levels);
      q.scales[h * channels + c] = scale;
      for (std::size_t t = 0; t < tokens; ++t) {
        const std::size_t e = (h * tokens + t) * channels + c;
        // Nearest code with respect to the stored float scale.
        double r = std::round(static_cast<double>(tensor[e]) / static_cast<double>(scale));
        r = std::min<double>(std::max<double>(r, -levels), levels);
        const auto code = static_cast<std::int32_t>(r);
        if (scheme == QuantScheme::kInt8PerChannel) {
          q.codes[e] = static_cast<std::uint8_t>(static_cast<std::int8_t>(code));
        } else {
          const auto nib = static_cast<std::uint8_t>(code & 0x0F);
          q.codes[e / 2] |= (e % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
        }
      }
    }
  }
  return q;
}

std::vector<float> dequantize_tensor(std::span<const std::uint8_t> codes, std::span<const float> scales,
                                     std::size_t heads, std::size_t tokens, std::size_t channels,
                                     QuantScheme scheme) {
  if (!is_quantized(scheme)) throw Error(ErrorCode::kInvalidConfig, "dequantize_tensor needs a quantized scheme");
  const std::size_t n = heads * tokens * channels;
  if (codes.size() < code_bytes(scheme, n))
    throw Error(ErrorCode::kDecode, "code block truncated: " + std::to_string(codes.size()) + " of " +
                                        std::to_string(code_bytes(scheme, n)) + " bytes");
  if (scales.size() < heads * channels) throw Error(ErrorCode::kDecode, "scale block truncated");

  std::vector<float> out(n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t e = (h * tokens + t) * channels + c;
        out[e] = static_cast<float>(unpack_code(codes, e, scheme)) * scales[h * channels + c];
      }
  return out;
}

std::size_t KVEntryHeader::scale_bytes() const {
  if (scheme == QuantScheme::kF32) return 0;
  return std::size_t{layers} * 2 * kv_heads * head_dim * sizeof(float);
}

std::size_t KVEntryHeader::payload_bytes() const {
  const std::size_t per_tensor = std::size_t{kv_heads} * document_len * head_dim;
  return std::size_t{layers} * 2 * code_bytes(scheme, per_tensor);
}

Bytes encode_entry(const DocKV& doc_kv, QuantScheme scheme) {
  const auto& kv = doc_kv.kv;
  if (kv.keys.size() != kv.layers || kv.values.size() != kv.layers || kv.valid.size() != kv.token_count)
    throw Error(ErrorCode::kEncoding, "malformed KV for '" + doc_kv.chunk_id + "'");
  for (std::size_t l = 0; l < kv.layers; ++l)
    if (kv.keys[l].size() != kv.elements_per_tensor() || kv.values[l].size() != kv.elements_per_tensor())
      throw Error(ErrorCode::kEncoding, "KV tensor size mismatch for '" + doc_kv.chunk_id + "'");
  if (doc_kv.valid_len > kv.token_count)
    throw Error(ErrorCode::kEncoding, "valid_len exceeds document length for '" + doc_kv.chunk_id + "'");

  KVEntryHeader h;
  h.scheme = scheme;
  h.layers = checked_u16(kv.layers, "layers");
  h.kv_heads = checked_u16(kv.kv_heads, "kv_heads");
  h.document_len = checked_u16(kv.token_count, "document_len");
  h.head_dim = checked_u16(kv.head_dim, "head_dim");
  h.valid_len = checked_u16(doc_kv.valid_len, "valid_len");
  checked_u16(doc_kv.chunk_id.size(), "chunk_id length");
  h.chunk_id = doc_kv.chunk_id;

  Bytes out;
  out.reserve(h.total_bytes());
  detail::ByteWriter w(out);
  w.bytes(kMagic);
  w.u16(h.version);
  w.u8(static_cast<std::uint8_t>(scheme));
  w.u16(h.layers);
  w.u16(h.kv_heads);
  w.u16(h.document_len);
  w.u16(h.head_dim);
  w.u16(h.valid_len);
  w.u16(static_cast<std::uint16_t>(h.chunk_id.size()));
  w.str(h.chunk_id);

  if (scheme == QuantScheme::kF32) {
    for (std::size_t l = 0; l < kv.layers; ++l)
      for (const auto* t : {&kv.keys[l], &kv.values[l]})
        for (float x : *t) {
          if (!std::isfinite(x)) throw Error(ErrorCode::kEncoding, "non-finite value in KV tensor");
          w.f32(x);
        }
    return out;
  }

  std::vector<QuantizedTensor> q;
  q.reserve(kv.layers * 2);
  for (std::size_t l = 0; l < kv.layers; ++l)
    for (const auto* t : {&kv.keys[l], &kv.values[l]})
      q.push_back(quantize_tensor(*t, kv.kv_heads, kv.token_count, kv.head_dim, scheme));
  for (const auto& qt : q)
    for (float s : qt.scales) w.f32(s);
  for (const auto& qt : q) w.bytes(qt.codes);
  return out;
}

KVEntryHeader read_entry_header(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, ErrorCode::kDecode);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw Error(ErrorCode::kFormat, "bad magic, not an HRKV entry");
  r.bytes(4);
  KVEntryHeader h;
  h.version = r.u16();
  if (h.version != kHrkvVersion)
    throw Error(ErrorCode::kFormat, "unsupported HRKV version " + std::to_string(h.version));
  h.scheme = scheme_from_code(r.u8());
  h.layers = r.u16();
  h.kv_heads = r.u16();
  h.document_len = r.u16();
  h.head_dim = r.u16();
  h.valid_len = r.u16();
  const std::uint16_t id_len = r.u16();
  h.chunk_id = r.str(id_len);
  if (h.valid_len > h.document_len) throw Error(ErrorCode::kDecode, "valid_len exceeds document_len");
  return h;
}

DocKV decode_entry(std::span<const std::uint8_t> bytes) {
  const KVEntryHeader h = read_entry_header(bytes);
  if (bytes.size() != h.total_bytes())
    throw Error(ErrorCode::kDecode, "entry '" + h.chunk_id + "' has " + std::to_string(bytes.size()) +
                                        " bytes, header implies " + std::to_string(h.total_bytes()));

  DocKV doc;
  doc.chunk_id = h.chunk_id;
  doc.valid_len = h.valid_len;
  doc.kv = KVTensorSet::zeros(h.layers, h.kv_heads, h.head_dim, h.document_len, 0);
  for (std::size_t t = 0; t < doc.kv.token_count; ++t) doc.kv.valid[t] = t < h.valid_len ? 1 : 0;

  detail::ByteReader r(bytes.subspan(h.header_bytes()), ErrorCode::kDecode);
  const std::size_t per_tensor = doc.kv.elements_per_tensor();

  if (h.scheme == QuantScheme::kF32) {
    for (std::size_t l = 0; l < h.layers; ++l)
      for (auto* t : {&doc.kv.keys[l], &doc.kv.values[l]}) {
        const auto raw = r.bytes(per_tensor * sizeof(float));
        std::memcpy(t->data(), raw.data(), raw.size());
        if constexpr (std::endian::native != std::endian::little) {
          detail::ByteReader fr(raw, ErrorCode::kDecode);
          for (auto& x : *t) x = fr.f32();
        }
      }
    return doc;
  }

  const std::size_t nscales = std::size_t{h.kv_heads} * h.head_dim;
  std::vector<std::vector<float>> scales(std::size_t{h.layers} * 2, std::vector<float>(nscales));
  for (auto& s : scales)
    for (auto& x : s) x = r.f32();
  const std::size_t cb = code_bytes(h.scheme, per_tensor);
  std::size_t idx = 0;
  for (std::size_t l = 0; l < h.layers; ++l)
    for (auto* t : {&doc.kv.keys[l], &doc.kv.values[l]}) {
      *t = dequantize_tensor(r.bytes(cb), scales[idx++], h.kv_heads, h.document_len, h.head_dim, h.scheme);
    }
  return doc;
}

}  // namespace hyperrag
