#pragma once

#include <stdexcept>
#include <string>

namespace jacdeform {

// Broad error families. The CLI maps each family onto its exit code.
enum class ErrorKind {
  InvalidArgument,  // exit 2
  Mesh,             // exit 3
  Numerical,        // exit 4
  Guidance,         // exit 5
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgumentError : public Error {
 public:
  explicit InvalidArgumentError(const std::string& what) : Error(ErrorKind::InvalidArgument, what) {}
};

class MeshError : public Error {
 public:
  explicit MeshError(const std::string& what) : Error(ErrorKind::Mesh, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

class GuidanceError : public Error {
 public:
  explicit GuidanceError(const std::string& what) : Error(ErrorKind::Guidance, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return 2;
    case ErrorKind::Mesh: return 3;
    case ErrorKind::Numerical: return 4;
    case ErrorKind::Guidance: return 5;
    case ErrorKind::Io: return 3;
  }
  return 1;
}

}  // namespace jacdeform
