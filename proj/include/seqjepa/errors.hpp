// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace seqjepa {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or input shape that does not match a config.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Token sequence assembled from mismatched view/action counts.
class SequenceError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// A latent vector whose norm underflowed; usually collapse or a bug.
class NumericDegeneracyError : public Error {
 public:
  using Error::Error;
};

/// Action kinds that cannot be combined or compared.
class CodecError : public Error {
 public:
  using Error::Error;
};

/// Sampling from a distribution with empty support.
class SamplingError : public Error {
 public:
  using Error::Error;
};

/// Inhibition of return removed every remaining candidate fixation.
class ExhaustedSaliencyError : public SamplingError {
 public:
  using SamplingError::SamplingError;
};

/// Malformed file contents (saliency grids, checkpoints, configs).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace seqjepa
