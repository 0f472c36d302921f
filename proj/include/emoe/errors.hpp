#pragma once

#include <stdexcept>
#include <string>

namespace emoe {

// Error taxonomy used across the library. Each maps to a distinct failure
// class so callers (and the CLI exit-code contract) can tell them apart.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand dimensions incompatible with the operation.
struct ShapeError : Error {
    using Error::Error;
};

// A scalar argument outside its domain (e.g. tau <= 0).
struct ParamError : Error {
    using Error::Error;
};

// A precondition of an operation was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Numerically degenerate input (rank deficiency, empty statistics).
struct DegeneracyError : Error {
    using Error::Error;
};

// Malformed external data (file layout, corrupt records).
struct FormatError : Error {
    using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace emoe
