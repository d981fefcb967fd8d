#include "gmem/status.hpp"

#include "gmem/types.hpp"

namespace gmem {

std::string_view to_string(Status s) {
  switch (s) {
    case Status::kSuccess: return "SUCCESS";
    case Status::kNoMem: return "ERR_NOMEM";
    case Status::kInvalidArg: return "ERR_INVALID_ARG";
    case Status::kNotFound: return "ERR_NOT_FOUND";
    case Status::kProtection: return "ERR_PROTECTION";
    case Status::kBusy: return "ERR_BUSY";
    case Status::kUnsupported: return "ERR_UNSUPPORTED";
    case Status::kDmaFault: return "ERR_DMA_FAULT";
    case Status::kRetryAccess: return "RETRY_ACCESS";
  }
  return "UNKNOWN";
}

std::string to_string(AttachMode m) {
  return m == AttachMode::kShared ? "shared" : "coherent";
}

std::string to_string(PlacementMode m) {
  return m == PlacementMode::kUnique ? "unique" : "remote";
}

}  // namespace gmem
