#pragma once

#include <stdexcept>
#include <string>

namespace crystal {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A jump between non-adjacent sites or an out-of-range site.
class InvalidEventError : public Error {
public:
    using Error::Error;
};

/// Numerical failures: overflow guards, solver breakdown, non-convergence.
class NumericalError : public Error {
public:
    using Error::Error;
};

class RateOverflowError : public NumericalError {
public:
    RateOverflowError(const std::string& what, double exponent)
        : NumericalError(what), exponent_(exponent) {}
    double exponent() const noexcept { return exponent_; }

private:
    double exponent_;
};

class TruncationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConvergenceError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class RunawaySimulationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Largest magnitude accepted as an argument to exp/sinh/cosh.
inline constexpr double kExponentGuard = 700.0;

}  // namespace crystal
