#pragma once

#include <stdexcept>
#include <string>

namespace fieldrecon {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid scalar argument (ranges, counts, schedule bounds).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Tensor/field dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Sensor layout outside the grid, duplicated, or incompatible with a forward model.
class LayoutError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad or missing configuration (unknown keys, missing artifacts).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Normalization statistics that cannot be inverted.
class DegenerateStatisticsError : public Error {
 public:
  using Error::Error;
};

/// Metric undefined for the given input (e.g. WMAPE against an all-zero truth).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value encountered during sampling. Carries where it happened.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, int step, int chain = -1)
      : Error(what + " (step " + std::to_string(step) +
              (chain >= 0 ? ", chain " + std::to_string(chain) : std::string()) + ")"),
        step_(step),
        chain_(chain) {}

  int step() const noexcept { return step_; }
  int chain() const noexcept { return chain_; }

 private:
  int step_;
  int chain_;
};

/// Non-finite loss during optimisation.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what + " (optimizer step " + std::to_string(step) + ")"), step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace fieldrecon
