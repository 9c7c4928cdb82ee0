// Error taxonomy shared across the library. The CLI maps these to stable
// process exit codes: ConfigError -> 1, DegenerateInputError -> 2,
// FormatError -> 3.
#pragma once

#include <stdexcept>
#include <string>

namespace meshrecover {

// Malformed or truncated files, wrong magic, bad shapes on disk.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration: unknown keys, out-of-range values, bad flags.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Inputs that are structurally valid but unusable (e.g. all-masked partial
// mesh, fewer than two distinct visible vertices).
class DegenerateInputError : public std::runtime_error {
public:
    explicit DegenerateInputError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace meshrecover
