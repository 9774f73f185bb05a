#pragma once

#include <stdexcept>
#include <string>

namespace mvtk {

// Bad user configuration (unknown key, wrong type, out-of-range value).
// The CLI maps this to exit code 2; everything else unexpected maps to 1.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition on an API argument was violated.
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Runtime failure outside the caller's control (I/O, corrupt file, ...).
inline void expect(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

}  // namespace mvtk
