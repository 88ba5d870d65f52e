#pragma once

#include <stdexcept>
#include <string>

namespace cdma {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition (shape mismatch, bad argument).
struct PreconditionError : Error {
  using Error::Error;
};

/// Invalid or inconsistent run configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Missing or unusable dataset / file-system state.
struct DataError : Error {
  using Error::Error;
};

/// Malformed on-disk container (bad magic, truncation, dtype mismatch).
struct FormatError : Error {
  using Error::Error;
};

/// Non-finite values where finite ones are required (NaN gradients, NaN loss).
struct NumericError : Error {
  using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw PreconditionError(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace cdma
