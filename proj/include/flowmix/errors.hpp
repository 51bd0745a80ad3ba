#ifndef FLOWMIX_ERRORS_HPP
#define FLOWMIX_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace flowmix {

/// Base class of all errors raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor/matrix extents do not match the operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input outside the mathematical domain of an op (e.g. log of a non-positive).
class DomainError : public Error {
public:
    using Error::Error;
};

/// A coupling or affine scale collapsed below the invertibility floor.
class DegenerateScale : public Error {
public:
    using Error::Error;
};

/// A non-finite value appeared where the contract requires finiteness.
class NumericalOverflow : public Error {
public:
    using Error::Error;
};

/// Every mixture component assigned zero likelihood to a sample.
class DegenerateSample : public Error {
public:
    using Error::Error;
};

/// A sample could not be scored by any class model.
class Unscorable : public Error {
public:
    using Error::Error;
};

/// Structural problem in an input file (bad magic, ragged rows, ...).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A cell/token failed to parse.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Two inputs that must agree (e.g. image and label counts) do not.
class ConsistencyError : public Error {
public:
    using Error::Error;
};

class EmptyDataset : public Error {
public:
    using Error::Error;
};

class InsufficientSamples : public Error {
public:
    using Error::Error;
};

/// An identifier that must be fresh already exists.
class ConflictError : public Error {
public:
    using Error::Error;
};

/// Invalid or unknown configuration key/value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Filesystem-level failure (missing path, short read, ...).
class IoError : public Error {
public:
    using Error::Error;
};

/// Corrupt or incompatible model file.
class PersistenceError : public Error {
public:
    using Error::Error;
};

} // namespace flowmix

#endif
