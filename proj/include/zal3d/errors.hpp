#pragma once

#include <stdexcept>
#include <string>

namespace zal3d {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad magic, malformed header.
class FormatError : public Error {
public:
    using Error::Error;
};

// Payload content violates a type invariant (e.g. NaN coordinate).
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

// Operation invoked on an object in the wrong state (e.g. empty bank).
class StateError : public Error {
public:
    using Error::Error;
};

class SynthesisError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

class ScoringError : public Error {
public:
    using Error::Error;
};

class MetricError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace zal3d
