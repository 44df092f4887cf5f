#pragma once

#include <stdexcept>
#include <string>

namespace voicemoe {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatch. Message names the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite input, log/div of an invalid operand, diverging loss value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (e.g. action index outside [0, classes)).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (bad hyperparameters, empty split, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents; message carries the line / column context.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed but out-of-range field values.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Checkpoint corruption: checksum, size or shape mismatch.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Unsupported checkpoint/report format version.
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Metric is mathematically undefined for the given inputs
// (e.g. ROC-AUC with a single class present).
class MetricError : public Error {
 public:
  using Error::Error;
};

// Training failed at runtime (non-finite loss, violated step invariant).
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff tape (double backward, backward on non-scalar).
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace voicemoe
