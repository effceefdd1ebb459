#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace asymflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class SvdConvergenceError : public Error {
 public:
  explicit SvdConvergenceError(std::size_t sweeps)
      : Error("svd: one-sided Jacobi did not converge after " + std::to_string(sweeps) +
              " sweeps"),
        sweeps_(sweeps) {}
  std::size_t sweeps() const noexcept { return sweeps_; }

 private:
  std::size_t sweeps_;
};

class CalibrationMismatch : public Error {
 public:
  using Error::Error;
};

// Raised when an integrator or training loop produces NaN/Inf.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require_same_size(std::size_t a, std::size_t b, const char* where) {
  if (a != b) {
    throw DimensionError(std::string(where) + ": dimension mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

}  // namespace detail
}  // namespace asymflow
