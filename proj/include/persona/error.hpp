#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace persona {

// Violated precondition of an operation (bad arguments, wrong mode, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Tensor shapes that do not fit together.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Malformed input file. `line()` is 1-based; 0 when not line-oriented.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A staged protocol was started without the artifact of the previous stage.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace persona
