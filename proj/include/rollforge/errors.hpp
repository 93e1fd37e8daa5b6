#pragma once

#include <stdexcept>
#include <string>

namespace rollforge {

// Argument outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Caller violated an operation precondition (ordering, shapes, masks).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Operation invoked in the wrong lifecycle phase.
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

// A configured size cap was exceeded.
struct ResourceError : std::length_error {
    using std::length_error::length_error;
};

// Score requested at zero noise, where it is undefined.
struct SingularLevelError : DomainError {
    using DomainError::DomainError;
};

struct InstabilityError : DomainError {
    using DomainError::DomainError;
};

}  // namespace rollforge
