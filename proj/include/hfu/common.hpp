#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hfu {

template <typename Scalar>
using DenseVector = Eigen::Vector<Scalar, Eigen::Dynamic>;
template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using DenseRowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// All public numerics are 64-bit; tighter tolerances are not representable
// in single precision.
using Vector = DenseVector<double>;
using Matrix = DenseMatrix<double>;
using RowMatrix = DenseRowMatrix<double>;
using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Maps to CLI exit code 3.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Maps to CLI exit code 4.
class DigestError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

// 64-bit FNV-1a, the content-hash primitive for datasets, schedules,
// configs and parameter vectors.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= bytes[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void update_value(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    update(&v, sizeof(T));
  }
  void update_doubles(std::span<const double> xs) {
    update(xs.data(), xs.size() * sizeof(double));
  }
  uint64_t digest() const { return hash_; }

 private:
  uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(uint64_t digest);
uint64_t digest_of(std::span<const double> xs);

inline void check_finite(const Vector& v, const std::string& context) {
  if (!v.allFinite()) throw DivergenceError("non-finite values in " + context);
}

}  // namespace hfu
