#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "hfu/common.hpp"

namespace hfu {

// xoshiro256** seeded through splitmix64. One instance owns one stream;
// sub-streams are derived with jumped()/long_jumped(), never from global
// state, so schedules and noise replay identically across runs and
// platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double next_double();
  // Unbiased integer in [0, bound). bound must be positive.
  uint64_t next_below(uint64_t bound);
  // Standard normal via Box-Muller; draws are cached pairwise.
  double next_normal();

  // Stream 2^128 (jump) or 2^192 (long_jump) steps ahead, `blocks` times.
  // Children start with an empty normal cache.
  Rng jumped(uint64_t blocks) const;
  Rng long_jumped(uint64_t blocks) const;

  uint64_t seed() const { return seed_; }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[next_below(i)]);
    }
  }

 private:
  Rng(std::array<uint64_t, 4> state, uint64_t seed)
      : state_(state), seed_(seed) {}
  void jump_with(const std::array<uint64_t, 4>& table);

  std::array<uint64_t, 4> state_{};
  uint64_t seed_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// alpha*x + y. Lengths must agree.
Vector axpy(double alpha, const Vector& x, const Vector& y);

double l2_norm(const Vector& x);

// d i.i.d. draws from N(0, sigma^2) per coordinate; sigma = 0 returns the
// zero vector without consuming the stream.
Vector gaussian_vector(Rng& rng, double sigma, Index d);

using LinearOperator = std::function<Vector(const Vector&)>;

struct PowerIterationResult {
  double value = 0.0;
  Vector vector;
  int iterations = 0;
  bool converged = false;
};

// Dominant eigenvalue of a symmetric operator. Stops when successive
// eigenvalue estimates differ by at most tol; non-convergence is reported
// through the flag, with the best estimate retained.
PowerIterationResult power_iteration(const LinearOperator& apply, Index d,
                                     int max_iters = 1000, double tol = 1e-10);

// Smallest eigenvalue via power iteration on lambda_max*I - H.
// lambda_max must upper-bound the spectrum.
PowerIterationResult min_eigenvalue(const LinearOperator& apply,
                                    double lambda_max, Index d,
                                    int max_iters = 1000, double tol = 1e-10);

// Pearson correlation in [-1, 1]; nullopt when either side has zero
// variance (degenerate inputs are surfaced, not mapped to 0).
std::optional<double> pearson(std::span<const double> xs,
                              std::span<const double> ys);

// Spearman rank correlation with average ranks for ties.
std::optional<double> spearman(std::span<const double> xs,
                               std::span<const double> ys);

}  // namespace hfu
