#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace kwest {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed arguments: wrong dimensions, out-of-range parameters, bad files.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Design matrix whose Gram matrix is numerically singular.
class IllConditionedDesign : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

/// Non-finite values or a failed decomposition.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An iterative solver stopped short of its tolerance.
class ToleranceNotMet : public Error {
public:
    using Error::Error;
};

/// ToleranceNotMet that carries the best iterate found so far.
template <class Best>
class ToleranceNotMetWith : public ToleranceNotMet {
public:
    ToleranceNotMetWith(const std::string& what, Best best)
        : ToleranceNotMet(what), best_(std::move(best)) {}

    const Best& best() const noexcept { return best_; }

private:
    Best best_;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw InvalidInput(msg);
}

} // namespace detail

} // namespace kwest
