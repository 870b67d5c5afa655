#pragma once

// Test-only oracles, independent of the implementation paths they check.

#include <vector>

#include "hfu/data.hpp"
#include "hfu/model.hpp"

namespace hfu::oracles {

// Central finite differences of the loss; oracle for grad().
inline Vector fd_grad(const Params& params, const Dataset& ds,
                      std::span<const std::size_t> ids, double eps) {
  Vector g(params.theta.size());
  for (Index j = 0; j < params.theta.size(); ++j) {
    Params plus = params, minus = params;
    plus.theta[j] += eps;
    minus.theta[j] -= eps;
    g[j] = (loss(plus, ds, ids) - loss(minus, ds, ids)) / (2.0 * eps);
  }
  return g;
}

// Central finite differences of the gradient along v; oracle for hvp().
inline Vector fd_hvp(const Params& params, const Dataset& ds,
                     std::span<const std::size_t> ids, const Vector& v,
                     double eps) {
  Params plus = params, minus = params;
  plus.theta += eps * v;
  minus.theta -= eps * v;
  return (grad(plus, ds, ids) - grad(minus, ds, ids)) / (2.0 * eps);
}

inline Params random_params(const ModelSpec& spec, Rng& rng, double scale = 0.5) {
  Vector theta(spec.parameter_count());
  for (Index i = 0; i < theta.size(); ++i) {
    theta[i] = scale * (2.0 * rng.next_double() - 1.0);
  }
  return make_params(spec, std::move(theta));
}

inline Vector random_vector(Index d, Rng& rng, double scale = 1.0) {
  Vector v(d);
  for (Index i = 0; i < d; ++i) v[i] = scale * (2.0 * rng.next_double() - 1.0);
  return v;
}

inline std::vector<std::size_t> random_batch(Index n, std::size_t size, Rng& rng) {
  std::vector<std::size_t> ids(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  rng.shuffle(ids);
  ids.resize(size);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace hfu::oracles
