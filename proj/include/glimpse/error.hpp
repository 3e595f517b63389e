#pragma once

#include <stdexcept>
#include <string>

namespace glimpse {

// Error taxonomy, mapped to distinct CLI exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (bad dims, wrong task, unparsable config).
struct ConfigError : Error {
  using Error::Error;
};

// Ingestion problems: unreadable files, malformed corpora.
struct DataError : Error {
  using Error::Error;
};

// Violated call contract (bad arguments, duplicate positions, empty scope).
struct ContractError : Error {
  using Error::Error;
};

// Tensor dimension mismatches.
struct ShapeError : ContractError {
  using ContractError::ContractError;
};

// NaN/Inf detected, training divergence.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace glimpse
