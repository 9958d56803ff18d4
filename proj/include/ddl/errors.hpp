#pragma once

#include <stdexcept>
#include <string>

namespace ddl {

// Violated precondition (bad shape, even window, non-binary mask, ...).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input data on disk is present but malformed or inconsistent.
struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem failure (unwritable directory, short write).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad configuration: unknown keys, wrong types, invalid values.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training hit a non-finite loss.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void expects(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace ddl
