#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

namespace ndae {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;
using cplx = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kOmega0 = 2.0 * kPi * 60.0;

// Bad input: malformed files, bad ids, inconsistent dimensions. CLI exit 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, int line)
      : ValidationError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Solver did not converge, SDP infeasible, singular matrices. CLI exit 1.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

inline Mat blkdiag(const Mat& a, const Mat& b) {
  Mat out = Mat::Zero(a.rows() + b.rows(), a.cols() + b.cols());
  out.topLeftCorner(a.rows(), a.cols()) = a;
  out.bottomRightCorner(b.rows(), b.cols()) = b;
  return out;
}

// 64-bit mixer used for counter-based random streams.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Counter-based generator: every draw is a pure function of (seed, stream, index),
// so replays and reordered sweeps give bit-identical noise.
class NoiseStream {
 public:
  explicit NoiseStream(uint64_t seed = 0, uint64_t stream = 0)
      : key_(splitmix64(seed ^ splitmix64(stream + 0x51ED27ULL))) {}

  // Uniform on the open interval (0, 1).
  double uniform(uint64_t index) const {
    uint64_t h = splitmix64(key_ ^ splitmix64(index));
    return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
  }

  double gaussian(uint64_t index) const {
    double u1 = uniform(2 * index);
    double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

 private:
  uint64_t key_;
};

}  // namespace ndae
