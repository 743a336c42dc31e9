#pragma once

#include <stdexcept>
#include <string>

namespace ctreg {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CTREG_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  };

CTREG_DEFINE_ERROR(FormatError)
CTREG_DEFINE_ERROR(TruncationError)
CTREG_DEFINE_ERROR(IoError)
CTREG_DEFINE_ERROR(ConfigError)
CTREG_DEFINE_ERROR(EmptyDatasetError)
CTREG_DEFINE_ERROR(DomainError)
CTREG_DEFINE_ERROR(DegenerateEmbeddingError)
CTREG_DEFINE_ERROR(InsufficientAnchorsError)
CTREG_DEFINE_ERROR(ShapeError)
CTREG_DEFINE_ERROR(ContractError)
CTREG_DEFINE_ERROR(UndefinedMetricError)
CTREG_DEFINE_ERROR(InsufficientStandsError)
CTREG_DEFINE_ERROR(FitError)
CTREG_DEFINE_ERROR(DivergenceError)

#undef CTREG_DEFINE_ERROR

}  // namespace ctreg
