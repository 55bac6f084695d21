#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lungcad {

enum class ErrorKind {
  kFormat,
  kUnsupportedFormat,
  kParse,
  kValidation,
  kDegenerateInput,
  kOutOfBounds,
  kConfiguration,
  kGeneration,
  kEmptyBag,
  kIo,
  kInternal,
};

std::string_view to_string(ErrorKind kind);

// All library failures are reported through this exception. The kind is
// stable and is what the CLI maps to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace lungcad
