#pragma once

#include <stdexcept>
#include <string>

namespace icl {

/// Filesystem or codec failure; the message names the path involved.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration, detected before any side effect.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Checkpoint format, version or architecture mismatch.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteLossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace icl
