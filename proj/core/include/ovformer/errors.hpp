#pragma once

#include <stdexcept>
#include <string>

namespace ovf {

// Error taxonomy mirrors the CLI exit codes: usage/config -> 1,
// data/format -> 2, numeric -> 3.

class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public UsageError {
public:
    explicit ConfigError(const std::string& msg) : UsageError(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public DataError {
public:
    explicit FormatError(const std::string& msg) : DataError(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ovf
