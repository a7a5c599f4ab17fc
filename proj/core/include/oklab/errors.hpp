#pragma once

#include <stdexcept>
#include <string>

namespace oklab {

/** Raised when a transport backend cannot deliver or accept a message
 *  (peer closed, socket failure, shutdown while blocked). */
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Raised when peers disagree about the shape of a collective exchange
 *  (mismatched vector lengths, unexpected message layout). */
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Raised when a wire buffer cannot be decoded into a sparse gradient. */
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Raised when a distribution fit is impossible (e.g. zero variance input
 *  to the Gaussian threshold estimator). */
class DegenerateDistributionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Raised on non-finite values where finite ones are required. */
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Raised when a ratio with a zero denominator is requested. */
class UndefinedRatioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Raised for configurations the lab does not support
 *  (e.g. non power-of-two worker counts for halving/doubling collectives). */
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace oklab
