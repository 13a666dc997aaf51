#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace uscd {

// Base of every error raised by the library. Callers that only need a
// message catch this; the subclasses exist so tests and the CLI can map
// specific failures to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define USCD_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

USCD_DEFINE_ERROR(InvalidLogits)
USCD_DEFINE_ERROR(InvalidDistribution)
USCD_DEFINE_ERROR(VocabMismatch)
USCD_DEFINE_ERROR(InvalidTemperature)
USCD_DEFINE_ERROR(InvalidTopP)
USCD_DEFINE_ERROR(InvalidVocab)
USCD_DEFINE_ERROR(OutOfRange)
USCD_DEFINE_ERROR(EmptyCorpus)
USCD_DEFINE_ERROR(TokenizeError)
USCD_DEFINE_ERROR(BackendError)
USCD_DEFINE_ERROR(TraceIncomplete)
USCD_DEFINE_ERROR(CheckerConfigError)
USCD_DEFINE_ERROR(ConfigError)

// Transport-level failures of the remote backend.
class BackendTimeout : public BackendError {
 public:
  using BackendError::BackendError;
};

class ProtocolError : public BackendError {
 public:
  using BackendError::BackendError;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at byte " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

#undef USCD_DEFINE_ERROR

}  // namespace uscd
