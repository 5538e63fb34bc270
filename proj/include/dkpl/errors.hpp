#ifndef DKPL_ERRORS_HPP
#define DKPL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace dkpl {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad architecture, even window, schedule gaps, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Shape or range mismatch in arguments.
class InputError : public Error {
public:
    using Error::Error;
};

/// A comparison that the active likelihood configuration cannot accept.
class IngestionError : public InputError {
public:
    using InputError::InputError;
};

/// On-disk container does not match its header.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Payload content violates an invariant (NaN, too-short loop, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Not enough symmetric pairs around a point to form an angle histogram.
class InsufficientSupportError : public DataError {
public:
    using DataError::DataError;
};

/// Operation called in a state that does not allow it.
class StateError : public Error {
public:
    using Error::Error;
};

/// Fewer than two unmeasured candidates remain.
class ExhaustionSignal : public Error {
public:
    using Error::Error;
};

/// Iterative solver failure or non-finite objective.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, int iterations = 0, double grad_norm = 0.0)
        : Error(what), iterations_(iterations), grad_norm_(grad_norm) {}

    int iterations() const noexcept { return iterations_; }
    double grad_norm() const noexcept { return grad_norm_; }

private:
    int iterations_;
    double grad_norm_;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

/// A submitted judgment fails validation against the session configuration.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// CLI exit status for an exception escaping a subcommand.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const DataError*>(&e) ||
        dynamic_cast<const InputError*>(&e))
        return 3;
    if (dynamic_cast<const NumericalError*>(&e)) return 4;
    return 1;
}

} // namespace dkpl

#endif
