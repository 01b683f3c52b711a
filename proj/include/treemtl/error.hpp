#pragma once

#include <stdexcept>
#include <string>

namespace treemtl {

// Base for every error raised by the library. Callers that only need to
// report a failure can catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined by an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity showed up where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An invalid network, training or experiment configuration.
class SpecError : public Error {
 public:
  using Error::Error;
};

// A pruned network disagrees with the network it was derived from.
class EquivalenceError : public Error {
 public:
  EquivalenceError(const std::string& what, std::size_t task)
      : Error(what), task_(task) {}
  std::size_t task() const noexcept { return task_; }

 private:
  std::size_t task_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace treemtl
