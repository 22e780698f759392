#pragma once

#include <stdexcept>
#include <string>

namespace voxprint {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define VOXPRINT_DEFINE_ERROR(Name)            \
  class Name : public Error {                  \
   public:                                     \
    using Error::Error;                        \
  };

VOXPRINT_DEFINE_ERROR(FormatError)       // malformed container / file header
VOXPRINT_DEFINE_ERROR(UnsupportedError)  // well-formed but unsupported encoding
VOXPRINT_DEFINE_ERROR(EmptyAudioError)
VOXPRINT_DEFINE_ERROR(SilentAudioError)  // no voiced frames
VOXPRINT_DEFINE_ERROR(ArgumentError)
VOXPRINT_DEFINE_ERROR(TooShortError)
VOXPRINT_DEFINE_ERROR(ConfigError)
VOXPRINT_DEFINE_ERROR(ShapeError)
VOXPRINT_DEFINE_ERROR(DegenerateError)
VOXPRINT_DEFINE_ERROR(NormalizationError)
VOXPRINT_DEFINE_ERROR(StateError)
VOXPRINT_DEFINE_ERROR(ClosedSetError)
VOXPRINT_DEFINE_ERROR(TrainingError)
VOXPRINT_DEFINE_ERROR(IoError)

#undef VOXPRINT_DEFINE_ERROR

}  // namespace voxprint
