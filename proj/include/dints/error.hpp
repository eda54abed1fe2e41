#pragma once

#include <stdexcept>
#include <string>

namespace dints {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user configuration (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// A violated invariant: infeasible topology, shape mismatch, bad checkpoint (exit code 3).
struct ValidationError : Error {
    using Error::Error;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

// Non-finite loss or gradient during optimization (exit code 4).
struct DivergenceError : Error {
    using Error::Error;
};

} // namespace dints
