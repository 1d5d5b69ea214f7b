// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace memcycle {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A precondition or invariant was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public ContractError {
public:
    DimensionMismatch(std::size_t expected, std::size_t actual)
        : ContractError("dimension mismatch: expected " + std::to_string(expected) + ", got " +
                        std::to_string(actual)),
          expected_(expected), actual_(actual) {}

    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

/// Transient failure of a remote service (timeout, transport, 5xx). Safe to retry.
class RetryableError : public Error {
public:
    using Error::Error;
};

/// Malformed serialized input. Line and column are 1-based.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line, std::size_t column)
        : Error("parse error at line " + std::to_string(line) + ", column " +
                std::to_string(column) + ": " + what),
          line_(line), column_(column) {}

    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t line_;
    std::size_t column_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Invalid run configuration. `pointer` is a JSON pointer to the offending key.
class ConfigError : public Error {
public:
    ConfigError(const std::string& pointer, const std::string& what)
        : Error(pointer.empty() ? what : pointer + ": " + what), pointer_(pointer) {}

    const std::string& pointer() const noexcept { return pointer_; }

private:
    std::string pointer_;
};

}  // namespace memcycle
