#pragma once

#include <stdexcept>
#include <string>

namespace skattn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SKATTN_DEFINE_ERROR(Name)        \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

SKATTN_DEFINE_ERROR(ShapeMismatch)
SKATTN_DEFINE_ERROR(NotScalar)
SKATTN_DEFINE_ERROR(DetachedGraph)
SKATTN_DEFINE_ERROR(InvalidRotation)
SKATTN_DEFINE_ERROR(BehindCamera)
SKATTN_DEFINE_ERROR(DegenerateProjection)
SKATTN_DEFINE_ERROR(StepOutOfRange)
SKATTN_DEFINE_ERROR(PatchConfigInvalid)
SKATTN_DEFINE_ERROR(IoError)
SKATTN_DEFINE_ERROR(FormatVersionMismatch)
SKATTN_DEFINE_ERROR(CorruptHeader)
SKATTN_DEFINE_ERROR(InvalidArgument)

#undef SKATTN_DEFINE_ERROR

}  // namespace skattn
