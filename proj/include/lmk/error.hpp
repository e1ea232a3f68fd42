#pragma once

#include <stdexcept>
#include <string>

namespace lmk {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents or parameter shapes that do not fit an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid argument that is not a shape problem (bad axis order, bad probability, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// A named tensor is absent from a weight store or heatmap file.
class MissingTensorError : public Error {
public:
    explicit MissingTensorError(std::string name)
        : Error("missing tensor '" + name + "'"), name_(std::move(name)) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

/// Optimization produced a non-finite value.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

} // namespace lmk
