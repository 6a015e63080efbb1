#pragma once

#include <stdexcept>
#include <string>

namespace sampled_sae {

// Invalid hyperparameters or mismatched shapes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Data that violates a precondition (non-finite values, constant input, ...).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke an operation contract (negative preactivations, stale trace).
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

struct EmptySelectionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite gradients or losses during optimisation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Metric undefined on the given data (zero variance, constant vectors).
struct UndefinedMetric : std::domain_error {
    using std::domain_error::domain_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace sampled_sae
