#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace m2m {

/// Violated precondition on arguments (shape mismatch, out-of-range step, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed binary input. Carries the byte offset where decoding stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A model was used before it was trained or loaded.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite value encountered during reverse diffusion.
class SamplingFault : public std::runtime_error {
 public:
  explicit SamplingFault(int step)
      : std::runtime_error("non-finite value during sampling at step " + std::to_string(step)),
        step_(step) {}

  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Non-finite loss during optimization.
class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, std::string last_checkpoint)
      : std::runtime_error(what), last_checkpoint_(std::move(last_checkpoint)) {}

  const std::string& last_checkpoint() const noexcept { return last_checkpoint_; }

 private:
  std::string last_checkpoint_;
};

}  // namespace m2m
