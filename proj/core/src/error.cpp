#include "spre/error.hpp"

namespace spre {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kIndivisibleChannels: return "indivisible_channels";
    case ErrorCode::kSubsetViolation: return "subset_violation";
    case ErrorCode::kMissingCache: return "missing_cache";
    case ErrorCode::kUninitializedStats: return "uninitialized_stats";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kDuplicateName: return "duplicate_name";
    case ErrorCode::kUnsupportedVersion: return "unsupported_version";
    case ErrorCode::kMissingEntry: return "missing_entry";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kInvariant: return "invariant";
  }
  return "unknown";
}

}  // namespace spre
