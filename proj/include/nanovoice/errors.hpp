#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nanovoice {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Scalar argument outside its admissible range (e.g. t outside [0,1]).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Input that makes a reduction undefined (all-zero mask, zero vector).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Zero-norm column met while normalizing a merged weight.
class SingularColumnError : public Error {
public:
    using Error::Error;
};

/// Inconsistent or unsupported configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Two otherwise valid objects that cannot be used together (N mismatch, layer dims).
class CompatibilityError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced by arithmetic.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Divergence during pretraining or adaptation.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Missing or unreadable file.
class FileError : public Error {
public:
    using Error::Error;
};

/// Malformed checkpoint; carries the byte offset where parsing failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace nanovoice
