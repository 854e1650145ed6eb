#pragma once

#include <stdexcept>
#include <string>

namespace usub {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Rejected input: bad arguments, dimension mismatches, out-of-range tokens.
struct InvalidInput : Error {
    using Error::Error;
};

struct DimensionError : InvalidInput {
    using InvalidInput::InvalidInput;
};

// Numerical failure such as SVD non-convergence. Carries the residual that
// failed to go below the convergence threshold.
struct NumericalError : Error {
    double residual;
    NumericalError(const std::string& msg, double res) : Error(msg), residual(res) {}
};

// Training diverged (NaN loss). Carries a short step log for diagnosis.
struct TrainingError : Error {
    std::string step_log;
    TrainingError(const std::string& msg, std::string log)
        : Error(msg), step_log(std::move(log)) {}
};

// I/O failure while reading or writing an artifact.
struct StorageError : Error {
    using Error::Error;
};

// Checkpoint validation failures, one named type per defect so callers can
// tell them apart.
struct FormatError : Error {
    using Error::Error;
};

struct BadMagicError : FormatError {
    using FormatError::FormatError;
};

struct BadVersionError : FormatError {
    using FormatError::FormatError;
};

struct ManifestBoundsError : FormatError {
    using FormatError::FormatError;
};

struct ShapeMismatchError : FormatError {
    using FormatError::FormatError;
};

// A pipeline stage was asked to run without its prerequisite artifact.
struct OrchestrationError : Error {
    using Error::Error;
};

}  // namespace usub
