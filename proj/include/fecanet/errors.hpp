#pragma once

#include <stdexcept>
#include <string>

namespace fecanet {

// Dimension or rank mismatch between tensors, or against an operation contract.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Structurally well-formed input that violates a documented precondition
// (non-binary mask, even neighborhood size, empty prediction list, ...).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk data: bad magic, wrong version, truncated payload.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (missing file, unwritable path).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. a non-scalar loss handed to gradient evaluation.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Metric queried from an empty accumulator.
struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_valid(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace fecanet
