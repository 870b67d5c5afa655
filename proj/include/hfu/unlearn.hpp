#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <vector>

#include "hfu/common.hpp"
#include "hfu/model.hpp"
#include "hfu/numkit.hpp"
#include "hfu/recollection.hpp"

namespace hfu {

struct UnlearnRequest {
  std::vector<std::size_t> forget_ids;  // non-empty, tracked, unconsumed
  long arrival_index = 0;
};

struct PrivacyBudget {
  double epsilon = 1.0;
  double delta = 1e-3;
  // The classical Gaussian mechanism needs epsilon <= 1; larger budgets
  // are allowed only with this flag and are marked on the result.
  bool allow_epsilon_above_one = false;

  void validate() const;
  bool outside_classical_regime() const { return epsilon > 1.0; }
};

struct BoundInputs {
  double eta0 = 0.0;
  double grad_bound = 0.0;
  double q = 0.0;
  double rho = 0.0;
  long total_steps = 0;
  int steps_per_epoch = 0;
  int batch_size = 0;
  int m = 0;
};

struct SensitivityEstimate {
  enum class Mode { oracle, bound };
  double value = 0.0;
  Mode mode = Mode::oracle;
  std::optional<BoundInputs> inputs;  // present iff mode == bound
};

// sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon, the per-coordinate
// standard deviation of the calibrated noise.
double noise_sigma(double sensitivity, const PrivacyBudget& budget);

struct UnlearnResult {
  Params clean;   // w-bar, pre-noise
  Params noisy;   // w-tilde
  double sigma = 0.0;
  std::vector<std::size_t> consumed;
  std::chrono::nanoseconds addition_time{0};  // summation + addition only
  uint64_t noise_seed = 0;
  bool outside_classical_regime = false;
  // Per-request (epsilon, delta) only; sequential runs carry no
  // composition accounting.
  bool composition_accounted = false;
};

// Stage III: clean update by vector addition, then calibrated noise.
// Consumed rows are tombstoned and the store's current-params digest
// advances to the clean result.
UnlearnResult unlearn(const Params& params, ApproximatorStore& store,
                      const UnlearnRequest& request, const PrivacyBudget& budget,
                      const SensitivityEstimate& sensitivity, Rng& rng);

// Applies each request to the running clean model; the final clean model
// matches a single batch request over the union.
std::vector<UnlearnResult> unlearn_sequential(
    const Params& params, ApproximatorStore& store,
    std::span<const UnlearnRequest> requests, const PrivacyBudget& budget,
    const SensitivityEstimate& sensitivity, Rng& rng);

// ||w_retrained - w - a_sum||; needs the retrained model the method exists
// to avoid, so this mode serves verification experiments.
SensitivityEstimate sensitivity_oracle(const Params& retrained,
                                       const Params& learned,
                                       const Vector& approximator_sum);

// Closed-form per-sample bound scaled by m:
//   2*eta0*G*(rho^T - q^(2T)) * (eta0*q/((rho-q)(rho-q^2)) + 1/(|B|(rho-q)))
// valid for q < rho < 1.
SensitivityEstimate sensitivity_bound(const RegularityConstants& consts,
                                      double eta0, double q, long total_steps,
                                      int steps_per_epoch, int batch_size, int m);

// Order-only estimate c * eps / (eta * sqrt(ln(1/delta)) * sqrt(d) * rho^n);
// the hidden constant of the underlying bound is exposed as a parameter.
double deletion_capacity(const PrivacyBudget& budget, Index d, double rho,
                         long n, double eta0, double hidden_constant = 1.0);

struct RepairResult {
  Params params;
  ApproximatorStore store;
  RecollectStats stats;
};

// Fine-tunes on the remaining dataset while carrying the existing rows
// through the repair multipliers and accumulating fresh injections.
// `remaining` must list the store's unconsumed tracked ids in ascending
// order, re-indexed from zero.
RepairResult repair(const ModelSpec& spec, const Dataset& remaining,
                    const Params& current, const ApproximatorStore& store,
                    const TrainConfig& repair_config,
                    const RecollectionConfig& rc);

}  // namespace hfu
