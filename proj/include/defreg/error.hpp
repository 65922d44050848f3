#pragma once

#include <stdexcept>
#include <string>

namespace defreg {

// Bad arguments, violated preconditions, inconsistent inputs.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Missing or unwritable files.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File exists but its contents are corrupt (length mismatch, bad header, non-finite payload).
struct FormatError : IoError {
    using IoError::IoError;
};

} // namespace defreg
