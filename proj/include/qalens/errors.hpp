#pragma once

#include <stdexcept>
#include <string>

namespace qalens {

// Exit-code contract for the CLI: usage/input errors -> 2, numeric failures -> 3.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : UsageError {
    explicit DimensionError(const std::string& msg) : UsageError(msg) {}
};

struct ParseError : UsageError {
    explicit ParseError(const std::string& msg) : UsageError(msg) {}
};

struct SchemaError : UsageError {
    explicit SchemaError(const std::string& msg) : UsageError(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace qalens
