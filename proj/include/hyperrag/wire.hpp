#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "hyperrag/kv_codec.hpp"

namespace hyperrag::wire {

inline constexpr std::uint32_t kMaxFrame = 64u << 20;

enum Opcode : std::uint8_t { kGet = 1, kPut = 2, kExists = 3, kStats = 4 };
enum Status : std::uint8_t { kOk = 0, kNotFound = 1, kError = 2 };

struct Request {
  std::uint8_t opcode = 0;
  std::string key;
  Bytes value;
};

struct Response {
  std::uint8_t status = kOk;
  Bytes body;
};

// Full frames, including the leading u32 frame length.
Bytes encode_request(std::uint8_t opcode, std::string_view key, std::span<const std::uint8_t> value = {});
Bytes encode_response(std::uint8_t status, std::span<const std::uint8_t> body = {});

// Parse a frame body (the bytes after frame_len). Throws Error(kProtocol).
Request parse_request(std::span<const std::uint8_t> frame);
Response parse_response(std::span<const std::uint8_t> frame);

}  // namespace hyperrag::wire
