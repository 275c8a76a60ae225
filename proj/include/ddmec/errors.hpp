#pragma once

#include <stdexcept>
#include <string>

namespace ddmec {

// Malformed or unusable input data (CSV, checkpoint, config values).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or other numerical failures during training/evaluation.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ddmec
