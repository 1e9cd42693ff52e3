#pragma once

#include <stdexcept>
#include <string>

namespace askbuild {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Unsupported hyperparameter or option combination.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// An action that the transition function refuses.
struct LegalityError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed corpus record, checkpoint or protocol payload.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken engine invariant (never expected on valid use).
struct InternalError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace askbuild
