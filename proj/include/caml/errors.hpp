#pragma once

#include <stdexcept>
#include <string>

namespace caml {

// Error taxonomy shared across the library. Callers that care about the
// failure class catch caml::Error and branch on kind(); everything derives
// from std::runtime_error so generic handlers keep working.
enum class ErrorKind {
  Dimension,    // shape/size mismatch
  Domain,       // value outside the mathematical domain (e.g. log of <= 0)
  Parameter,    // invalid scalar parameter (temperature, step index, ...)
  Contract,     // API precondition violated (non-scalar loss, mask mismatch)
  Data,         // missing or malformed input data
  Modality,     // unknown or disabled modality
  Generation,   // world generation could not satisfy its constraints
  Abstraction,  // discrete abstraction support too large
  Topology,     // invalid communication topology
  Model,        // model configuration unusable (e.g. no providers at all)
  Label,        // class index out of range
  State,        // optimizer state inconsistent with parameters
  Config,       // experiment config invalid (schema violation, unknown key)
  Format,       // file format/version mismatch
  Integrity,    // truncated or corrupt payload
  Metric,       // metric undefined on the given inputs
  Stage,        // experiment stage failed
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace caml
