#pragma once

#include <stdexcept>
#include <string>

namespace hob {

// Operand shapes do not fit the operation.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Invalid model / block / experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file on disk (HOT1, labels, manifests).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke an operation precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite value detected during optimisation or checking.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace hob
