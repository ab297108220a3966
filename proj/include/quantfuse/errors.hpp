// errors.hpp - exception types shared across the library.

#pragma once

#include <stdexcept>
#include <string>

namespace qf {

// Dimension / layout mismatch; message names the offending dims.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid argument values (non-positive scales, bad config, ...).
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Serialization problems: bad magic, version, truncated files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A computation produced NaN/inf where the contract requires finite values.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Matching produced fewer correspondences than the solver needs.
struct InsufficientMatchesError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace qf
