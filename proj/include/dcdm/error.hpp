#pragma once

#include <stdexcept>
#include <string>

namespace dcdm {

// Base for everything the library throws on a contract violation.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf reached a public result, or training diverged.
class NumericError : public Error {
public:
    using Error::Error;
};

// Weight files, manifests, reports: anything parsed from bytes on disk.
class FormatError : public Error {
public:
    using Error::Error;
};

class DecodeError : public Error {
public:
    using Error::Error;
};

// Bad dataset contents or an argument outside its documented range.
class DataError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace dcdm
