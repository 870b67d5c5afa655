#pragma once

#include <span>

#include "hfu/common.hpp"
#include "hfu/data.hpp"
#include "hfu/model.hpp"
#include "hfu/trainer.hpp"

namespace hfu {

struct BaselineConfig {
  double damping = 0.01;
  TrainConfig finetune;
  TrainConfig neggrad;

  // Damping must be strictly positive unless the loss is strongly convex
  // through an explicit L2 term.
  void validate(const ModelSpec& spec) const;
};

struct TimedParams {
  Params params;
  double seconds = 0.0;
};

// Exact retraining; wall time recorded as the speedup denominator.
TimedParams retrain_baseline(const ModelSpec& spec, const Dataset& ds,
                             const BatchSchedule& schedule,
                             std::span<const std::size_t> removed,
                             const TrainConfig& config, const Params& init,
                             const Provenance* learned = nullptr);

// w-hat + 1/(n-m) * [ (sum_i H_i - sum_U H_j)/(n-m) + damping*I ]^{-1} sum_U grad,
// solved as a damped symmetric system, never by explicit inversion.
Params newton_step(const Params& w_hat, const Dataset& ds,
                   std::span<const std::size_t> forget, double damping,
                   Index cap = kFullHessianCap);

// w-hat + 1/n * [ (1/n) sum_i H_i + damping*I ]^{-1} sum_U grad.
Params infinitesimal_jackknife(const Params& w_hat, const Dataset& ds,
                               std::span<const std::size_t> forget,
                               double damping, Index cap = kFullHessianCap);

// SGD on the remaining dataset starting from w.
Params finetune(const Params& start, const Dataset& remaining,
                const TrainConfig& config);

// Gradient ascent on the forget dataset with clipping.
Params neggrad(const Params& start, const Dataset& forget,
               const TrainConfig& config);

}  // namespace hfu
