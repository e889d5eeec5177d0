#include "vbiopsy/common/error.hpp"

namespace vbiopsy {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::NonFinite: return "non_finite";
    case ErrorCode::GeometryMismatch: return "geometry_mismatch";
    case ErrorCode::NoRoi: return "no_roi";
    case ErrorCode::DegenerateInput: return "degenerate_input";
    case ErrorCode::TrainingDiverged: return "training_diverged";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::Unprocessable: return "unprocessable";
    case ErrorCode::IntegrityMismatch: return "integrity_mismatch";
    case ErrorCode::MissingPrerequisite: return "missing_prerequisite";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

}  // namespace vbiopsy
