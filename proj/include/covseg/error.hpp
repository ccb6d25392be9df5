#pragma once

#include <cstddef>
#include <exception>
#include <stdexcept>
#include <string>

namespace covseg {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define COVSEG_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

COVSEG_DEFINE_ERROR(ParseError);
COVSEG_DEFINE_ERROR(UnsupportedFormatError);
COVSEG_DEFINE_ERROR(GeometryError);
COVSEG_DEFINE_ERROR(OrientationError);
COVSEG_DEFINE_ERROR(EmptySurfaceError);
COVSEG_DEFINE_ERROR(TopologyError);
COVSEG_DEFINE_ERROR(EmptySeedError);
COVSEG_DEFINE_ERROR(OutOfDomainError);
COVSEG_DEFINE_ERROR(SingularSystemError);
COVSEG_DEFINE_ERROR(InsufficientDataError);
COVSEG_DEFINE_ERROR(RegistrationError);
COVSEG_DEFINE_ERROR(UndefinedMetricError);
COVSEG_DEFINE_ERROR(InvalidArgumentError);
COVSEG_DEFINE_ERROR(IncompleteGridError);

#undef COVSEG_DEFINE_ERROR

/// Raised while replaying an edit script; carries the failing event index
/// (or -1 when the script itself is malformed).
class ScriptError : public Error {
 public:
  ScriptError(long event_index, const std::string& what)
      : Error(event_index < 0 ? what
                              : "event " + std::to_string(event_index) + ": " + what),
        event_index_(event_index) {}
  long event_index() const noexcept { return event_index_; }

 private:
  long event_index_;
};

/// Pipeline failure tagged with the stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, std::exception_ptr cause = nullptr)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)), cause_(std::move(cause)) {}
  const std::string& stage() const noexcept { return stage_; }
  /// The original exception, if any.
  std::exception_ptr cause() const noexcept { return cause_; }

 private:
  std::string stage_;
  std::exception_ptr cause_;
};

}  // namespace covseg
