#pragma once

#include <stdexcept>
#include <string>

namespace ssm {

// Dimension/shape violations (matmul mismatch, bad axis, bad slice width).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric-domain violations (log of non-positive, zero-variance dataset).
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// API-contract violations (backward on non-scalar, missing grad).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user configuration (non-divisible head count, bad milestones).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-format and filesystem failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ssm
