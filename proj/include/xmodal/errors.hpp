#pragma once

#include <stdexcept>
#include <string>

namespace xmodal {

/// Base of every error raised by the library. Each subclass maps onto one
/// CLI exit code (see cli.hpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A zero-norm feature row or weight column reached a normalization.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Manifest or feature-store problems; the message names the offending record.
class LoadError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

/// A loss became non-finite during training.
class DivergenceError : public Error {
public:
    DivergenceError(std::string loss, long epoch, long step, const std::string& what)
        : Error(what), loss_(std::move(loss)), epoch_(epoch), step_(step) {}

    const std::string& loss() const noexcept { return loss_; }
    long epoch() const noexcept { return epoch_; }
    long step() const noexcept { return step_; }

private:
    std::string loss_;
    long epoch_;
    long step_;
};

}  // namespace xmodal
