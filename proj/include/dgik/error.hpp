#pragma once

#include <stdexcept>
#include <string>

namespace dgik {

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  ShapeMismatch,
  NonFinite,
  ReconstructionDiverged,
  Parse,
  Io,
  State,
};

const char* to_string(ErrorCode code);

/// Library-wide exception. The code lets callers (the CLI in particular)
/// map failures onto stable exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dgik
