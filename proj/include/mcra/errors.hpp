#pragma once

#include <stdexcept>
#include <string>

namespace mcra {

// Error taxonomy shared by the library and the CLI exit-code mapping.

/// Caller broke a documented precondition (bad argument, shape mismatch).
struct contract_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Filesystem problem: missing file, unwritable destination.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Structurally invalid file content (bad magic, wrong shapes, truncation).
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A numeric routine left its sane domain (non-finite value, dead bracket).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// An experiment plan references an artifact that cannot be resolved.
struct plan_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mcra
