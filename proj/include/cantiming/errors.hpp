#pragma once

#include <stdexcept>
#include <string>

namespace cantiming {

/// Bus state or scenario that violates an invariant the model depends on.
class ModelCorruption : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Caller broke an operation precondition (e.g. flowing past a significant moment).
class PreconditionViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Invalid message-set or scenario configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A deadline miss where the caller required a schedulable message set.
class SchedulabilityViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Observation that cannot come from a valid chain instance.
class MalformedObservation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace cantiming
