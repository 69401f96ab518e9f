#pragma once

#include <stdexcept>
#include <string>

namespace ckmerge {

// Bad inputs: malformed recipes, mismatched structures, out-of-range
// hyperparameters. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string & msg) : std::runtime_error(msg) {}
};

// Filesystem and container-format failures: missing files, truncated or
// corrupt headers, unwritable paths. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string & msg) : std::runtime_error(msg) {}
};

// A file that cannot be understood as a checkpoint container: truncated,
// header not valid JSON, bad offsets, unknown dtype, duplicate names.
class ParseError : public IoError {
public:
    explicit ParseError(const std::string & msg) : IoError(msg) {}
};

} // namespace ckmerge
