#ifndef CAMH_COMMON_HPP_
#define CAMH_COMMON_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace camh {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad caller input: unknown architecture, shape mismatch, out-of-range args.
struct ArgumentError : Error {
  using Error::Error;
};

// Missing or unreadable dataset / checkpoint files.
struct IoError : Error {
  using Error::Error;
};

// File present but contents inconsistent (bad magic, label out of range...).
struct DataIntegrityError : Error {
  using Error::Error;
};

// Corrupt, truncated or version-mismatched artifact/checkpoint archives.
struct SerializationError : Error {
  using Error::Error;
};

// Non-finite loss during an optimization loop; carries the step/epoch index.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, int64_t at_step)
      : Error(what), step(at_step) {}
  int64_t step;
};

struct TrainingError : DivergenceError {
  using DivergenceError::DivergenceError;
};

// Metric requested over an empty set or with a zero denominator.
struct UndefinedMetricError : Error {
  using Error::Error;
};

// Subsample left fewer examples than classes.
struct DegenerateSubsetError : Error {
  using Error::Error;
};

// Network failure after retries (serve client).
struct TransportError : Error {
  using Error::Error;
};

// Artifact dimensions do not match the served model.
struct IncompatibilityError : Error {
  using Error::Error;
};

#define CAMH_CHECK_ARG(cond, msg)            \
  do {                                       \
    if (!(cond)) throw ::camh::ArgumentError(msg); \
  } while (0)

struct Shape3 {
  int c = 0;
  int h = 0;
  int w = 0;

  int64_t numel() const { return int64_t(c) * h * w; }
  bool operator==(const Shape3& o) const = default;
  std::string str() const {
    return "(" + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

}  // namespace camh

#endif
