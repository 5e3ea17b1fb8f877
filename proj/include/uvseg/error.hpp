#pragma once

#include <stdexcept>
#include <string>

namespace uvs {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed arguments or data (wrong shape, empty input, out-of-range values).
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Inconsistent configuration (dimension mismatch between modules, unknown keys).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or diverging optimisation.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A checkpoint or artifact on disk does not match what the code expects.
class ArtifactMismatch : public Error {
public:
    using Error::Error;
};

/// Weights that must be present before use were never loaded.
class InitializationError : public Error {
public:
    using Error::Error;
};

} // namespace uvs
