#pragma once

#include <stdexcept>
#include <string>

namespace fastmvs {

enum class ErrorKind {
  InvalidArgument,  // bad numeric input (non-positive depth, NaN coords, ...)
  Dimension,        // tensor shape mismatch
  Config,           // invalid configuration / unsupported sizes
  Contract,         // violated precondition on data (e.g. unnormalized weights)
  Parse,            // malformed file
  Validation,       // well-formed file with inconsistent content
  Data,             // missing or unusable input data
  Divergence,       // non-finite training loss
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Parse: return "parse error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Data: return "data error";
    case ErrorKind::Divergence: return "divergence";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Parse failure that remembers where it happened. line is 1-based; 0 means
/// "not line oriented" (binary formats), in which case offset is a byte offset.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(ErrorKind::Parse, source + ":" + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace fastmvs
