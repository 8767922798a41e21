#pragma once

#include <stdexcept>
#include <string>

namespace mixprune {

enum class ErrorKind {
  validation,            // malformed graph or config values
  shape,                 // tensor shape mismatch
  contract,              // precondition violated by the caller
  config,                // bad configuration or missing input file
  load,                  // file parse / integrity failure
  unsupported_topology,  // graph structure outside the supported set
  degenerate,            // e.g. a layer with every channel pruned
  divergence,            // NaN/inf loss during training
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::shape: return "shape";
    case ErrorKind::contract: return "contract";
    case ErrorKind::config: return "config";
    case ErrorKind::load: return "load";
    case ErrorKind::unsupported_topology: return "unsupported_topology";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mixprune
