#pragma once

#include <stdexcept>
#include <string>

namespace mgic {

// Error taxonomy mapped to CLI exit codes:
//   config/dimension/contract -> 1, numerical -> 2, io -> 3.
enum class ErrorCategory { Config, Numerical, Io };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& msg)
        : std::runtime_error(msg), category_(cat) {}
    ErrorCategory category() const { return category_; }

private:
    ErrorCategory category_;
};

// Bad user-supplied configuration (invalid spec, divisibility failure, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(ErrorCategory::Config, msg) {}
};

// Shape disagreement between tensors or between a tensor and a layer.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(ErrorCategory::Config, msg) {}
};

// API contract violation (e.g. backward() on a non-scalar loss).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(ErrorCategory::Config, msg) {}
};

// Non-finite values, divergence, failed numerical checks.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error(ErrorCategory::Numerical, msg) {}
};

// File system and format problems (bad magic, truncation, checksum mismatch).
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(ErrorCategory::Io, msg) {}
};

inline int exit_code_for(const Error& e) {
    switch (e.category()) {
        case ErrorCategory::Config: return 1;
        case ErrorCategory::Numerical: return 2;
        case ErrorCategory::Io: return 3;
    }
    return 1;
}

}  // namespace mgic
