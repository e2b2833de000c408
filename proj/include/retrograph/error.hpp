#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace retrograph {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parser errors carry the character offset into the input text.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class SyntaxError : public ParseError {
 public:
  using ParseError::ParseError;
};

class ValenceError : public ParseError {
 public:
  using ParseError::ParseError;
};

class FormatError : public Error {
 public:
  using Error::Error;
};
class MappingError : public Error {
 public:
  using Error::Error;
};
class LabelError : public Error {
 public:
  using Error::Error;
};
class GateError : public Error {
 public:
  using Error::Error;
};
class SurgeryError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class NumericsError : public Error {
 public:
  using Error::Error;
};
class GradCheckFailure : public Error {
 public:
  GradCheckFailure(const std::string& what, double max_error)
      : Error(what), max_error_(max_error) {}
  double max_error() const noexcept { return max_error_; }

 private:
  double max_error_;
};
class VersionError : public Error {
 public:
  using Error::Error;
};
class ChecksumError : public Error {
 public:
  using Error::Error;
};
class EmptyBeamError : public Error {
 public:
  using Error::Error;
};
class NoRouteFound : public Error {
 public:
  NoRouteFound(const std::string& what, std::size_t expansions, std::size_t frontier)
      : Error(what), expansions_(expansions), frontier_(frontier) {}
  std::size_t expansions() const noexcept { return expansions_; }
  std::size_t frontier_size() const noexcept { return frontier_; }

 private:
  std::size_t expansions_;
  std::size_t frontier_;
};
class AlreadyExpanded : public Error {
 public:
  using Error::Error;
};
class DegenerateLoss : public Error {
 public:
  using Error::Error;
};
class ModeError : public Error {
 public:
  using Error::Error;
};

}  // namespace retrograph
