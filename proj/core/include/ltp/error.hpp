#pragma once

#include <stdexcept>
#include <string>

namespace ltp {

// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class FormatError : public DataError {
public:
    using DataError::DataError;
};

// Token sequence (plus prompt slots) longer than the model's position table.
class SequenceOverflow : public DataError {
public:
    using DataError::DataError;
};

class FingerprintMismatch : public Error {
public:
    using Error::Error;
};

}  // namespace ltp
