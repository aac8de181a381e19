#pragma once

#include <stdexcept>
#include <string>

namespace swm {

// Contract violations: mismatched dimensions, misuse of an API.
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Invalid parameter values (tau < 1, g_L <= 0, ...). Rejected at construction.
struct ParamError : std::invalid_argument {
    explicit ParamError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File format / filesystem failures. Carries a byte offset when known.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
    IoError(const std::string& msg, long long offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")") {}
};

}  // namespace swm
