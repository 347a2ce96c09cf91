#include "hyperrag/error.hpp"

namespace hyperrag {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kRange: return "range";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kDegenerateInput: return "degenerate-input";
    case ErrorCode::kEncoding: return "encoding";
    case ErrorCode::kDecode: return "decode";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kStore: return "store";
    case ErrorCode::kDuplicate: return "duplicate";
    case ErrorCode::kUsage: return "usage";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kProtocol: return "protocol";
  }
  return "unknown";
}

}  // namespace hyperrag
