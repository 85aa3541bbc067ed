#pragma once

#include <stdexcept>
#include <string>

namespace best {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define BEST_DEFINE_ERROR(Name)        \
  struct Name : Error {                \
    using Error::Error;                \
  }

BEST_DEFINE_ERROR(DecodeError);
BEST_DEFINE_ERROR(OversizedTransaction);
BEST_DEFINE_ERROR(UnknownVehicle);
BEST_DEFINE_ERROR(InsufficientNodes);
BEST_DEFINE_ERROR(NotYourTurn);
BEST_DEFINE_ERROR(TimeTravel);
BEST_DEFINE_ERROR(ShapeMismatch);
BEST_DEFINE_ERROR(DivergenceDetected);
BEST_DEFINE_ERROR(EmptySequence);
BEST_DEFINE_ERROR(ConfigInvalid);
BEST_DEFINE_ERROR(IntegrityViolation);

#undef BEST_DEFINE_ERROR

}  // namespace best
