#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vbiopsy {

enum class ErrorCode {
  InvalidArgument,
  NonFinite,
  GeometryMismatch,
  NoRoi,
  DegenerateInput,
  TrainingDiverged,
  NotFound,
  Conflict,
  Unprocessable,
  IntegrityMismatch,
  MissingPrerequisite,
  Io,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a machine-readable code so the
// service layer can map it onto an HTTP status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) throw Error(code, what);
}

}  // namespace vbiopsy
