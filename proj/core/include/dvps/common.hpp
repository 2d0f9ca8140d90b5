#pragma once

#include <stdexcept>
#include <string>

namespace dvps {

/// Malformed or inconsistent data: bad file contents, integrity violations,
/// mismatched extents between related values.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Numeric contract violation: NaN/Inf produced by a primitive, diverging
/// training loss, non-finite cost matrices.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// File level failure: missing file, bad magic, truncated payload.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dvps
