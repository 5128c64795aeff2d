#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace spre {

enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kIndivisibleChannels,
  kSubsetViolation,
  kMissingCache,
  kUninitializedStats,
  kBadMagic,
  kTruncated,
  kDuplicateName,
  kUnsupportedVersion,
  kMissingEntry,
  kIo,
  kConfig,
  kInvariant,
};

/// Stable identifier used in JSON error objects, e.g. "shape_mismatch".
std::string_view error_code_name(ErrorCode code);

/// Every failure raised by the library is an Error carrying a machine-readable
/// code next to the human-readable message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace spre
