#pragma once

#include <stdexcept>
#include <string>

namespace ctseg {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// User-facing configuration problems (CLI exit code 1).
class ConfigError : public Error {
public:
    using Error::Error;
};
class InvalidWindow : public ConfigError {
public:
    using ConfigError::ConfigError;
};

// Problems with input data or on-disk artifacts (CLI exit code 2).
class DataError : public Error {
public:
    using Error::Error;
};
class MalformedFile : public DataError {
public:
    using DataError::DataError;
};
class UnsupportedFormat : public DataError {
public:
    using DataError::DataError;
};
class IOFailure : public DataError {
public:
    using DataError::DataError;
};
class MissingCase : public DataError {
public:
    using DataError::DataError;
};
class ConfigMismatch : public DataError {
public:
    using DataError::DataError;
};
class MissingTile : public DataError {
public:
    using DataError::DataError;
};

// Contract violations inside the pipeline (CLI exit code 3).
class LogicError : public Error {
public:
    using Error::Error;
};
class ShapeError : public LogicError {
public:
    using LogicError::LogicError;
};
class DomainError : public LogicError {
public:
    using LogicError::LogicError;
};
class EmptyInput : public LogicError {
public:
    using LogicError::LogicError;
};
class DegenerateCase : public LogicError {
public:
    using LogicError::LogicError;
};
class NonFiniteLoss : public LogicError {
public:
    using LogicError::LogicError;
};

}  // namespace ctseg
