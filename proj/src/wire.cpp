#include "hyperrag/wire.hpp"

#include <limits>

#include "hyperrag/detail/bytes.hpp"
#include "hyperrag/error.hpp"

namespace hyperrag::wire {

Bytes encode_request(std::uint8_t opcode, std::string_view key, std::span<const std::uint8_t> value) {
  if (key.size() > std::numeric_limits<std::uint16_t>::max())
    throw Error(ErrorCode::kProtocol, "key longer than 65535 bytes");
  std::size_t body = 1 + 2 + key.size();
  if (opcode == kPut) body += 4 + value.size();
  if (body > kMaxFrame) throw Error(ErrorCode::kProtocol, "request exceeds the 64 MiB frame limit");
  Bytes out;
  out.reserve(4 + body);
  detail::ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(body));
  w.u8(opcode);
  w.u16(static_cast<std::uint16_t>(key.size()));
  w.str(key);
  if (opcode == kPut) {
    w.u32(static_cast<std::uint32_t>(value.size()));
    w.bytes(value);
  }
  return out;
}

Bytes encode_response(std::uint8_t status, std::span<const std::uint8_t> body) {
  const std::size_t len = 1 + 4 + body.size();
  if (len > kMaxFrame) throw Error(ErrorCode::kProtocol, "response exceeds the 64 MiB frame limit");
  Bytes out;
  out.reserve(4 + len);
  detail::ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(len));
  w.u8(status);
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body);
  return out;
}

Request parse_request(std::span<const std::uint8_t> frame) {
  detail::ByteReader r(frame, ErrorCode::kProtocol);
  Request req;
  req.opcode = r.u8();
  if (req.opcode < kGet || req.opcode > kStats)
    throw Error(ErrorCode::kProtocol, "unknown opcode " + std::to_string(req.opcode));
  req.key = r.str(r.u16());
  if (req.opcode == kPut) {
    auto v = r.bytes(r.u32());
    req.value.assign(v.begin(), v.end());
  }
  if (r.remaining() != 0)
    throw Error(ErrorCode::kProtocol, std::to_string(r.remaining()) + " trailing bytes in request frame");
  return req;
}

Response parse_response(std::span<const std::uint8_t> frame) {
  detail::ByteReader r(frame, ErrorCode::kProtocol);
  Response resp;
  resp.status = r.u8();
  if (resp.status > kError) throw Error(ErrorCode::kProtocol, "unknown status " + std::to_string(resp.status));
  auto b = r.bytes(r.u32());
  resp.body.assign(b.begin(), b.end());
  if (r.remaining() != 0) throw Error(ErrorCode::kProtocol, "trailing bytes in response frame");
  return resp;
}

}  // namespace hyperrag::wire
