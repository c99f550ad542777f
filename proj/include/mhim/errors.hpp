// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mhim {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested kernel.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A scalar argument is outside its valid range (temperature, ratio, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// A kernel produced or received a non-finite value.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A caller broke an API contract (non-scalar loss, bad index list, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment or training configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or missing file.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Metric requested on data where it is undefined (e.g. a single class).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

}  // namespace mhim
