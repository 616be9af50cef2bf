#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace sceneseg {

namespace detail {

template <typename... Args>
std::string msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace detail

/// Tensor/matrix dimensions do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A configuration value violates its documented invariant.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// An operation was invoked in a state it does not support
/// (e.g. eval-mode batch norm before any training step).
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A caller-supplied argument violates a documented contract
/// (e.g. a pairing permutation with a fixed point).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// File could not be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File content does not match the expected format.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, size_t byte_offset)
        : std::runtime_error(detail::msg(what, " (at byte offset ", byte_offset, ")")),
          offset(byte_offset) {}
    explicit FormatError(const std::string& what) : std::runtime_error(what), offset(0) {}

    size_t offset;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace sceneseg
