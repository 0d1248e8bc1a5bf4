#pragma once

#include <stdexcept>
#include <string>

namespace flatec {

/// Malformed or out-of-range input data (scans, bitstreams, config files).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint/model mismatch or corrupted model state.
struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace flatec
