#include "hfu/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hfu {

namespace {

uint64_t splitmix64_next(uint64_t& s) {
  uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

constexpr std::array<uint64_t, 4> kJump = {
    0x180ec6d33cfd0abaULL, 0xd5a61266f0c9392cULL, 0xa9582618e03fc9aaULL,
    0x39abdc4529b1661cULL};
constexpr std::array<uint64_t, 4> kLongJump = {
    0x76e15d3efefdcbbfULL, 0xc5004e441c522fb3ULL, 0x77710069854ee241ULL,
    0x39109bb02acbe635ULL};

}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed) {
  uint64_t s = seed;
  for (auto& word : state_) word = splitmix64_next(s);
}

uint64_t Rng::next_u64() {
  const uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t Rng::next_below(uint64_t bound) {
  require(bound > 0, "Rng::next_below: bound must be positive");
  // Lemire's multiply-shift with rejection; unbiased and platform-stable.
  unsigned __int128 m =
      static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(bound);
  auto lo = static_cast<uint64_t>(m);
  if (lo < bound) {
    const uint64_t threshold = (-bound) % bound;
    while (lo < threshold) {
      m = static_cast<unsigned __int128>(next_u64()) *
          static_cast<unsigned __int128>(bound);
      lo = static_cast<uint64_t>(m);
    }
  }
  return static_cast<uint64_t>(m >> 64);
}

double Rng::next_normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = next_double();
  while (u1 <= 0.0) u1 = next_double();
  const double u2 = next_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

void Rng::jump_with(const std::array<uint64_t, 4>& table) {
  std::array<uint64_t, 4> acc{};
  for (uint64_t word : table) {
    for (int bit = 0; bit < 64; ++bit) {
      if (word & (1ULL << bit)) {
        for (int i = 0; i < 4; ++i) acc[i] ^= state_[i];
      }
      next_u64();
    }
  }
  state_ = acc;
}

Rng Rng::jumped(uint64_t blocks) const {
  Rng child(state_, seed_);
  for (uint64_t i = 0; i < blocks; ++i) child.jump_with(kJump);
  return child;
}

Rng Rng::long_jumped(uint64_t blocks) const {
  Rng child(state_, seed_);
  for (uint64_t i = 0; i < blocks; ++i) child.jump_with(kLongJump);
  return child;
}

std::string digest_hex(uint64_t digest) {
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = hex[digest & 0xf];
    digest >>= 4;
  }
  return out;
}

uint64_t digest_of(std::span<const double> xs) {
  Fnv1a h;
  h.update_doubles(xs);
  return h.digest();
}

Vector axpy(double alpha, const Vector& x, const Vector& y) {
  require(x.size() == y.size(), "axpy: length mismatch");
  Vector out = alpha * x + y;
  check_finite(out, "axpy result");
  return out;
}

double l2_norm(const Vector& x) { return x.norm(); }

Vector gaussian_vector(Rng& rng, double sigma, Index d) {
  require(sigma >= 0.0, "gaussian_vector: sigma must be non-negative");
  Vector out = Vector::Zero(d);
  if (sigma == 0.0) return out;
  for (Index i = 0; i < d; ++i) out[i] = sigma * rng.next_normal();
  return out;
}

PowerIterationResult power_iteration(const LinearOperator& apply, Index d,
                                     int max_iters, double tol) {
  require(d >= 1, "power_iteration: d must be >= 1");
  PowerIterationResult result;
  // Deterministic start vector with energy in every coordinate.
  Rng rng(0x9e3779b97f4a7c15ULL);
  Vector v(d);
  for (Index i = 0; i < d; ++i) v[i] = rng.next_double() + 0.5;
  v.normalize();

  double lambda_prev = 0.0;
  for (int k = 0; k < max_iters; ++k) {
    Vector w = apply(v);
    check_finite(w, "power_iteration operator output");
    const double lambda = v.dot(w);
    const double norm = w.norm();
    if (norm == 0.0) {
      // v lies in the kernel; the dominant eigenvalue along this start is 0.
      result.value = 0.0;
      result.vector = v;
      result.iterations = k + 1;
      result.converged = true;
      return result;
    }
    v = w / norm;
    result.value = lambda;
    result.vector = v;
    result.iterations = k + 1;
    if (k > 0 && std::abs(lambda - lambda_prev) <= tol) {
      result.converged = true;
      return result;
    }
    lambda_prev = lambda;
  }
  return result;
}

PowerIterationResult min_eigenvalue(const LinearOperator& apply,
                                    double lambda_max, Index d, int max_iters,
                                    double tol) {
  const LinearOperator shifted = [&](const Vector& v) {
    return Vector(lambda_max * v - apply(v));
  };
  PowerIterationResult shifted_result =
      power_iteration(shifted, d, max_iters, tol);
  shifted_result.value = lambda_max - shifted_result.value;
  return shifted_result;
}

std::optional<double> pearson(std::span<const double> xs,
                              std::span<const double> ys) {
  require(xs.size() == ys.size(), "pearson: length mismatch");
  require(xs.size() >= 2, "pearson: need at least two pairs");
  const double n = static_cast<double>(xs.size());
  const double mean_x = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double mean_y = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double cov = 0.0, var_x = 0.0, var_y = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mean_x;
    const double dy = ys[i] - mean_y;
    cov += dx * dy;
    var_x += dx * dx;
    var_y += dy * dy;
  }
  if (var_x == 0.0 || var_y == 0.0) return std::nullopt;
  const double r = cov / std::sqrt(var_x * var_y);
  return std::clamp(r, -1.0, 1.0);
}

namespace {

// Average ranks, ties shared.
std::vector<double> average_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double shared = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> xs,
                               std::span<const double> ys) {
  require(xs.size() == ys.size(), "spearman: length mismatch");
  require(xs.size() >= 2, "spearman: need at least two pairs");
  const std::vector<double> rx = average_ranks(xs);
  const std::vector<double> ry = average_ranks(ys);
  return pearson(rx, ry);
}

}  // namespace hfu
