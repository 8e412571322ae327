#pragma once

#include <stdexcept>
#include <string>

namespace knnsid {

/// Base for every error raised by the library. The CLI maps subclasses onto
/// stable exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke a documented precondition (bad label, stale cache, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Zero-norm vector handed to a cosine computation.
class DegenerateVectorError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Manifest or dataset content that cannot support the requested operation.
class DatasetError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed binary artifact. Subclasses distinguish the failure kind.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

class MagicMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
public:
    using FormatError::FormatError;
};

} // namespace knnsid
