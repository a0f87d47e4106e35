#pragma once

#include <stdexcept>
#include <string>

namespace px3d {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration; the message names the offending field.
class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class GeometryError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data (bad magic, truncated payload, ...).
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class MetricError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace px3d
