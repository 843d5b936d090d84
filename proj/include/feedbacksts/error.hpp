#pragma once

#include <stdexcept>
#include <string>

namespace fsts {

/// Bad input from the caller: malformed config, violated precondition,
/// inconsistent dataset layout. The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while doing work on valid input (I/O, divergence, ...). Exit code 3.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the debug finiteness guard; names the offending layer.
class NonFiniteError : public RuntimeFailure {
 public:
  NonFiniteError(const std::string& layer)
      : RuntimeFailure("non-finite activation after layer " + layer), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

}  // namespace fsts
