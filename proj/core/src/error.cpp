#include "cosim/error.hpp"

namespace cosim {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadVersion: return "BadVersion";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::BadId: return "BadId";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::MissingId: return "MissingId";
    case ErrorCode::BadFormat: return "BadFormat";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::TrainCountOutOfRange: return "TrainCountOutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::BadArgument: return "BadArgument";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteGradient:
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::Io:
      return false;
    default:
      return true;
  }
}

}  // namespace cosim
