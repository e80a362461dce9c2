#pragma once

#include <stdexcept>
#include <string>

namespace finedeep {

// Shape/dimension disagreement between tensors.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid model/training configuration (indivisible d_ff, bad field values...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid runtime input (out-of-range token id, empty corpus...).
struct InputError : std::runtime_error {
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed file contents (bad magic, truncation...).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem-level failure.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace finedeep
