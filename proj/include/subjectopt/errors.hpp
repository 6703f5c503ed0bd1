#pragma once

#include <stdexcept>
#include <string>

namespace subjectopt {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (bad layer id, K > t, rank 0, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Field-level validation failure for user-supplied job specs.
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

// External weights or runtimes that are not present on this machine.
class AvailabilityError : public Error {
public:
    using Error::Error;
};

// The backend cannot perform the requested operation (e.g. inversion).
class CapabilityError : public Error {
public:
    using Error::Error;
};

// Tape or activation memory would exceed the configured budget.
class SizingError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace subjectopt
