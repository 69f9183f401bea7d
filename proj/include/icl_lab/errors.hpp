#pragma once

#include <stdexcept>
#include <string>

namespace icl {

// Bad arguments, malformed configs, violated preconditions.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite loss or activations during training.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File format or filesystem problems.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ConfigError(message);
    }
}

}  // namespace icl
