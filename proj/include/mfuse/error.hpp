#pragma once

#include <stdexcept>
#include <string>

namespace mfuse {

// Every error raised by the library derives from Error so callers can catch
// the whole family at a CLI boundary and map it to an exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidInput : Error {
  using Error::Error;
};

// Raised where a NaN or infinity reaches a numerical kernel.
struct NonFiniteValue : InvalidInput {
  using InvalidInput::InvalidInput;
};

struct InvalidConfig : Error {
  using Error::Error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct UndefinedMetric : Error {
  using Error::Error;
};

struct TrainingDiverged : Error {
  using Error::Error;
};

}  // namespace mfuse
