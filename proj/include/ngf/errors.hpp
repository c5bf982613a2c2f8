#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ngf {

/// Broad failure class, used by the command-line tool to pick an exit code.
enum class ErrorKind {
  Usage,      // bad arguments or configuration
  Data,       // unreadable, malformed or inconsistent input
  Numerical,  // non-finite values or degenerate geometry during computation
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& message) {
  return Error(ErrorKind::Usage, message);
}

inline Error data_error(const std::string& message) {
  return Error(ErrorKind::Data, message);
}

inline Error numerical_error(const std::string& message) {
  return Error(ErrorKind::Numerical, message);
}

/// The field gradient at a point is (numerically) zero, so no direction can be derived.
class GradientVanished : public Error {
 public:
  GradientVanished(std::size_t point, double norm)
      : Error(ErrorKind::Numerical,
              "field gradient vanished at point " + std::to_string(point) +
                  " (norm " + std::to_string(norm) + ")"),
        point_(point),
        norm_(norm) {}

  std::size_t point() const noexcept { return point_; }
  double norm() const noexcept { return norm_; }

 private:
  std::size_t point_;
  double norm_;
};

/// The field never changes sign on the extraction grid.
class EmptySurface : public Error {
 public:
  EmptySurface() : Error(ErrorKind::Numerical, "field has no sign change on the grid") {}
};

/// A local neighborhood spans less than a plane, so its normal is undefined.
class DegenerateNeighborhood : public Error {
 public:
  explicit DegenerateNeighborhood(std::size_t point)
      : Error(ErrorKind::Data,
              "degenerate neighborhood around point " + std::to_string(point)),
        point_(point) {}

  std::size_t point() const noexcept { return point_; }

 private:
  std::size_t point_;
};

}  // namespace ngf
