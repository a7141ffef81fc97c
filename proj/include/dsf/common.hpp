#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dsf {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Iterative routine failed to reach its tolerance.  Carries the last iterate
// and residual so callers can decide whether the partial answer is usable.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double last_iterate, double residual)
      : std::runtime_error(what + " (last iterate " + std::to_string(last_iterate) +
                           ", residual " + std::to_string(residual) + ")"),
        last_iterate_(last_iterate),
        residual_(residual) {}

  double last_iterate() const { return last_iterate_; }
  double residual() const { return residual_; }

 private:
  double last_iterate_;
  double residual_;
};

// Mean of a view group was too close to zero to define a direction.
class DegenerateDirectionError : public std::runtime_error {
 public:
  explicit DegenerateDirectionError(const std::string& what) : std::runtime_error(what) {}
};

// Config/input rejected before any computation ran.  `field` names the
// offending entry (dotted path for nested configs).
class ValidationError : public std::runtime_error {
 public:
  ValidationError(const std::string& field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(field) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Deterministically derive an independent stream seed from a root seed and a
// purpose tag, so subsystems (data, init, sampling, ...) never share streams.
// FNV-1a over the tag mixed with the root, then a splitmix64 finalizer.
inline std::uint64_t derive_seed(std::uint64_t root, const std::string& tag) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = root + 0x9e3779b97f4a7c15ull * (h | 1ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace dsf
