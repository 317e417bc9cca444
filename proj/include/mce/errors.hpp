#pragma once

#include <stdexcept>
#include <string>

namespace mce {

// Error taxonomy used across the project. The CLI maps these to exit codes:
// ConfigError -> 2, DataError/IoError -> 3, everything else -> 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or unusable data content (bad labels, missing classes, short pools).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem and serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inner optimization did not reach its certificate.
struct SolverError : std::runtime_error {
  SolverError(const std::string& msg, double grad_norm_)
      : std::runtime_error(msg), grad_norm(grad_norm_) {}
  double grad_norm;
};

// Operation invoked in an invalid object state (e.g. predicting before freezing).
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mce
