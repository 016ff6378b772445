#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cosim {

enum class ErrorCode {
  // input validation
  BadMagic,
  BadVersion,
  DimMismatch,
  CountMismatch,
  DuplicateId,
  BadId,
  NonFiniteValue,
  MissingId,
  BadFormat,
  BadConfig,
  EmptyInput,
  TrainCountOutOfRange,
  LengthMismatch,
  ZeroVector,
  BadArgument,
  // runtime
  NonFiniteGradient,
  NonFiniteLoss,
  Io,
};

std::string_view to_string(ErrorCode code);

/// True for codes caused by bad user input (configs, files, arguments).
bool is_validation_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cosim
