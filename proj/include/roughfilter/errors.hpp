#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace roughfilter {

// Malformed or inconsistent inputs (shapes, grids, ranges).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Configuration that is well-formed but not allowed (unknown model, bad refine factor, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A required derivative or callable is missing from a coefficient set.
class CapabilityError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite or runaway state during integration.
class NumericalBlowUp : public std::runtime_error {
 public:
  NumericalBlowUp(const std::string& what, std::size_t step, std::size_t particle)
      : std::runtime_error(what + " (step " + std::to_string(step) + ", particle " +
                           std::to_string(particle) + ")"),
        step_(step),
        particle_(particle) {}
  std::size_t step() const { return step_; }
  std::size_t particle() const { return particle_; }

 private:
  std::size_t step_;
  std::size_t particle_;
};

// Normalisation constant vanished or became non-finite.
class DegenerateMass : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A run finished but its diagnostics make it unusable (too many box exits, ...).
class InvalidRun : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace roughfilter
