#pragma once

#include <stdexcept>
#include <string>

namespace alora {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
struct DimensionError : Error {
    using Error::Error;
};

// NaN/Inf produced by a forward or backward pass.
struct NumericError : Error {
    using Error::Error;
};

// An operation precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// A run/model/allocator configuration is out of its invariants.
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace alora
