#pragma once

#include <stdexcept>
#include <string>

namespace aimlab {

// Shape disagreement between operands. Message names both shapes.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller violated an operation's precondition.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf or other numeric breakdown.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed file input. Message starts with the failure kind
// ("bad magic", "truncated", "label out of range", ...).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace aimlab
