#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace zogp {

/// Thrown when a numerical procedure fails (factorization breakdown,
/// Newton divergence, active-set cycling). Carries a human-readable
/// diagnostic of the failure point.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Thrown when a solver is asked to run in a regime it does not support.
class UnsupportedConfiguration : public std::invalid_argument {
 public:
  explicit UnsupportedConfiguration(const std::string& what)
      : std::invalid_argument(what) {}
};

inline void symmetrize(Eigen::MatrixXd& m) {
  m = ((m + m.transpose()) * 0.5).eval();
}

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) {
  return (m + m.transpose()) * 0.5;
}

/// Column-wise vectorization, vec(M).
inline Eigen::VectorXd vectorize(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

inline Eigen::MatrixXd unvectorize(const Eigen::Ref<const Eigen::VectorXd>& v,
                                   Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols)
    throw std::invalid_argument("unvectorize: size mismatch");
  Eigen::MatrixXd m(rows, cols);
  Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = v;
  return m;
}

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return m.allFinite();
}

/// splitmix64; used to derive independent sub-seeds from one run seed.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace zogp
