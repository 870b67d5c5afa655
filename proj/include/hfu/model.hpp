#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "hfu/common.hpp"
#include "hfu/data.hpp"

namespace hfu {

enum class ModelKind { ridge, logistic, mlp2 };

constexpr Index kFullHessianCap = 8192;

struct ModelSpec {
  ModelKind kind = ModelKind::logistic;
  Index input_dim = 0;
  int classes = 0;
  Index hidden = 0;      // mlp2 only
  double l2_coeff = 0.0;

  Index parameter_count() const;
  uint64_t digest() const;
};

struct Params {
  ModelSpec spec;
  Vector theta;
};

Params make_params(const ModelSpec& spec, Vector theta);
uint64_t params_digest(const Params& params);

// "HFPW" container: magic, version, spec fields, then d little-endian reals.
void save_params(const Params& params, const std::filesystem::path& path);
Params load_params(const std::filesystem::path& path);

// Per-sample loss; the L2 term is part of the per-sample loss, so batch
// means carry the regularizer exactly once.
double loss_one(const Params& params, const Example& ex);
Vector grad_one(const Params& params, const Example& ex);

double loss(const Params& params, const Dataset& ds,
            std::span<const std::size_t> ids);
double loss(const Params& params, const Dataset& ds);
Vector grad(const Params& params, const Dataset& ds,
            std::span<const std::size_t> ids);
Vector grad(const Params& params, const Dataset& ds);

// Shared per-batch forward state for Hessian-vector products: one context
// serves many vectors with arithmetic identical to the one-vector path.
// apply() is const and safe to call concurrently.
class HvpContext {
 public:
  HvpContext(const Params& params, const Dataset& ds,
             std::span<const std::size_t> ids);

  Index batch_count() const { return static_cast<Index>(ids_.size()); }

  // (1/|B|) sum_i grad^2 l(w; z_i) v with the L2 term included.
  Vector apply(const Vector& v) const;
  // sum over the batch of data-term Hessian products (no divisor, no L2).
  Vector apply_data_sum(const Vector& v) const;
  // Single-sample data-term Hessian product; id must be in the batch.
  Vector apply_one_data(std::size_t id, const Vector& v) const;
  // Leave-one-out multiplier: drops `excluded`'s full per-sample Hessian
  // (data term and its L2 share) while keeping the batch divisor.
  Vector apply_excluding(const Vector& v, std::size_t excluded) const;

 private:
  Vector apply_one_data_cached(std::size_t pos, const Vector& v) const;

  const Params* params_;
  const Dataset* ds_;
  std::vector<std::size_t> ids_;
  // cached per-example forward state (model-kind dependent)
  Matrix softmax_;    // K x |B|  (logistic, mlp2)
  Matrix hidden_;     // h x |B|  (mlp2) tanh activations
  Matrix hidden_d_;   // h x |B|  (mlp2) 1 - a1^2
  Matrix resid_;      // K x |B|  (mlp2) p - y
  Matrix back_;       // h x |B|  (mlp2) W2^T (p - y)
};

Vector hvp(const Params& params, const Dataset& ds,
           std::span<const std::size_t> ids, const Vector& v);

// Explicit symmetric Hessian, assembled column-by-column through hvp.
// Refuses d beyond `cap`; explicit-Hessian baselines are infeasible there.
Matrix full_hessian(const Params& params, const Dataset& ds,
                    std::span<const std::size_t> ids,
                    Index cap = kFullHessianCap);

std::vector<int> predict(const Params& params, const Dataset& ds,
                         std::span<const std::size_t> ids);
std::vector<int> predict(const Params& params, const Dataset& ds);

struct RegularityConstants {
  enum class Source { estimated, estimated_unconverged, user_supplied };

  double lambda_min = 0.0;   // lower curvature bound
  double smoothness = 0.0;   // M, upper curvature bound
  double grad_bound = 0.0;   // G, max per-sample gradient norm seen
  double rho = 0.0;          // max{|1 - eta0*lambda|, |1 - eta0*M|}
  Source source = Source::estimated;

  double rho_for(double eta) const;
};

// M from power iteration on the full-dataset Hessian (+5% margin), lambda
// from the shifted iteration floored at l2_coeff, G from the observed max
// per-sample gradient (clip threshold dominates when clipping is active).
RegularityConstants estimate_constants(const Params& params, const Dataset& ds,
                                       const BatchSchedule& schedule,
                                       double observed_max_grad,
                                       std::optional<double> clip_threshold = {});

}  // namespace hfu
