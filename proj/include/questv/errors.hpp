#pragma once

#include <stdexcept>
#include <string>

namespace questv {

// Base of every error raised by the simulator.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PastTimeError : public Error {
 public:
  using Error::Error;
};

class OverflowError : public Error {
 public:
  using Error::Error;
};

// Mutation of monitor-owned state without the matching capability.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Illegal state-machine transition (vm_enter on a running sandbox, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

class AllocationError : public Error {
 public:
  using Error::Error;
};

// Internal bookkeeping went wrong; the run cannot continue.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Scenario validation failure. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class AdmissionError : public ConfigError {
 public:
  AdmissionError(const std::string& what, double total, double bound)
      : ConfigError(what), total_(total), bound_(bound) {}

  double total() const noexcept { return total_; }
  double bound() const noexcept { return bound_; }

 private:
  double total_;
  double bound_;
};

}  // namespace questv
