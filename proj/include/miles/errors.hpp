#pragma once

#include <stdexcept>
#include <string>

namespace miles {

enum class ErrorKind {
  dimension,
  contract,
  config,
  data,
  vocabulary,
  sampling,
  state,
  numeric,
  io,
  usage,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MILES_DEFINE_ERROR(Name, Kind)                                     \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MILES_DEFINE_ERROR(DimensionError, dimension)
MILES_DEFINE_ERROR(ContractError, contract)
MILES_DEFINE_ERROR(ConfigError, config)
MILES_DEFINE_ERROR(DataError, data)
MILES_DEFINE_ERROR(VocabularyError, vocabulary)
MILES_DEFINE_ERROR(SamplingError, sampling)
MILES_DEFINE_ERROR(StateError, state)
MILES_DEFINE_ERROR(NumericError, numeric)
MILES_DEFINE_ERROR(IoError, io)
MILES_DEFINE_ERROR(UsageError, usage)

#undef MILES_DEFINE_ERROR

// Process exit code for an error category: 1 usage, 2 data, 3 numeric.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numeric:
      return 3;
    case ErrorKind::usage:
    case ErrorKind::config:
      return 1;
    default:
      return 2;
  }
}

}  // namespace miles
