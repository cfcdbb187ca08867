#pragma once

#include <stdexcept>
#include <string>

namespace uar {

// Every library failure derives from Error so callers can map it to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define UAR_DEFINE_ERROR(Name)             \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

UAR_DEFINE_ERROR(ShapeError);
UAR_DEFINE_ERROR(IndexError);
UAR_DEFINE_ERROR(ConfigError);
UAR_DEFINE_ERROR(DegenerateBasis);
UAR_DEFINE_ERROR(ZeroNorm);
UAR_DEFINE_ERROR(BatchTooSmall);
UAR_DEFINE_ERROR(LengthExceeded);
UAR_DEFINE_ERROR(NonFinite);
UAR_DEFINE_ERROR(ParseError);
UAR_DEFINE_ERROR(MissingFile);
UAR_DEFINE_ERROR(EmptyCorpus);

#undef UAR_DEFINE_ERROR

}  // namespace uar
