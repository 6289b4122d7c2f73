#pragma once

#include <stdexcept>
#include <string>

namespace npad {

// Every library failure derives from Error so callers (the CLI in particular)
// can map categories onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes do not conform for the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An index (class label, attribute column, ...) is out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid precondition on user-supplied configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
public:
    using Error::Error;
};

/// A dataset specification that admits no valid joint distribution.
class SpecError : public Error {
public:
    using Error::Error;
};

/// Statistic undefined for the given input (empty group, zero marginal, 0/0 rate).
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// A training-time code path tried to read a protected attribute.
class FirewallError : public Error {
public:
    using Error::Error;
};

/// Attribute selection could not start (e.g. empty disparity set).
class SelectionError : public Error {
public:
    using Error::Error;
};

}  // namespace npad
