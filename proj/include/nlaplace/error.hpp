#pragma once

#include <stdexcept>
#include <string>

namespace nlaplace {

/// Base class for every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// An argument lies outside the mathematical domain of the operation.
class DomainError : public Error
{
public:
    using Error::Error;
};

/// A computation produced a non-finite value or an iteration failed to converge.
class NumericalError : public Error
{
public:
    using Error::Error;
};

/// Malformed configuration, input file, or invalid option combination.
class ConfigError : public Error
{
public:
    using Error::Error;
};

/// Two artifacts (checkpoint, dataset) do not belong together.
class IncompatibleError : public Error
{
public:
    using Error::Error;
};

} // namespace nlaplace
