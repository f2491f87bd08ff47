#pragma once

#include <stdexcept>
#include <string>

namespace mmrl {

// Base of every error raised by the library. `kind()` is a stable short tag
// used by the CLI diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + " error: " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MMRL_DEFINE_ERROR(Name, tag)                                 \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(tag, what) {}     \
  }

MMRL_DEFINE_ERROR(ShapeError, "shape");
MMRL_DEFINE_ERROR(ContractError, "contract");
MMRL_DEFINE_ERROR(ConfigError, "config");
MMRL_DEFINE_ERROR(DataError, "data");
MMRL_DEFINE_ERROR(FormatError, "format");
MMRL_DEFINE_ERROR(IntegrityError, "integrity");
MMRL_DEFINE_ERROR(NormalizationError, "normalization");
MMRL_DEFINE_ERROR(DegenerateMaskError, "degenerate-mask");
MMRL_DEFINE_ERROR(CapacityError, "capacity");
MMRL_DEFINE_ERROR(DeterminismError, "determinism");
MMRL_DEFINE_ERROR(DivergenceError, "divergence");
// Violations of the evaluation protocol (class leakage, missing inputs).
MMRL_DEFINE_ERROR(ProtocolError, "protocol");

#undef MMRL_DEFINE_ERROR

}  // namespace mmrl
