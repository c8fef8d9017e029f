#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace robumtl {

// Error hierarchy. The CLI maps ValidationError-family to exit 1 and
// IoError-family to exit 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

struct LookupError : Error {
    explicit LookupError(const std::string& msg) : Error(msg) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& msg) : Error(msg) {}
};

struct ModeError : Error {
    explicit ModeError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents; carries the byte offset where parsing stopped.
struct FormatError : IoError {
    FormatError(const std::string& msg, uint64_t offset)
        : IoError(msg + " (at byte offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    uint64_t byte_offset;
};

struct InternalError : Error {
    explicit InternalError(const std::string& msg) : Error(msg) {}
};

}  // namespace robumtl
