#ifndef EKPC_ERROR_HPP
#define EKPC_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ekpc {

// Root of every exception thrown by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// Precondition violated by an argument value (negative variance, empty input, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

// Zero-norm vector where a direction is required.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    NonFiniteError(const std::string& what, std::size_t coordinate)
        : Error(what + " (coordinate " + std::to_string(coordinate) + ")"), coordinate_(coordinate) {}

    [[nodiscard]] std::size_t coordinate() const noexcept { return coordinate_; }

private:
    std::size_t coordinate_;
};

// Malformed on-disk data. Carries the byte offset at which parsing failed.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Violation of the class-incremental protocol (overlapping class sets, ...).
class ProtocolError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace ekpc

#endif  // EKPC_ERROR_HPP
