#pragma once

#include <stdexcept>
#include <string>

namespace ctreason {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnknownTokenError : public Error {
public:
    explicit UnknownTokenError(std::string fragment)
        : Error("unknown token: '" + fragment + "'"), fragment_(std::move(fragment)) {}
    const std::string& fragment() const noexcept { return fragment_; }

private:
    std::string fragment_;
};

class RangeError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class MissingRoutingTokenError : public Error { using Error::Error; };
class EmptyMaskError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

/// Transport-level failure talking to an external generation endpoint.
class ClientError : public Error {
public:
    ClientError(const std::string& what, int attempts) : Error(what), attempts_(attempts) {}
    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

}  // namespace ctreason
