#pragma once

#include <stdexcept>
#include <string>

namespace dbrn {

// Bad arguments: mismatched shapes, unknown strategy names, invalid configs.
class parameter_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Missing or unreadable files; always carries the offending path in the message.
class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Files present but mutually inconsistent (e.g. rgb/xyz resolution mismatch).
class corrupt_sample_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inputs that admit no meaningful result (all-invalid depth, single-class AUROC).
class degenerate_input_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operation invoked in the wrong state (unloaded networks, version mismatch).
class state_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace dbrn
