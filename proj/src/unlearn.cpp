#include "hfu/unlearn.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace hfu {

void PrivacyBudget::validate() const {
  require(epsilon > 0.0, "budget: epsilon must be positive");
  require(delta > 0.0 && delta < 1.0, "budget: delta must be in (0,1)");
  if (epsilon > 1.0 && !allow_epsilon_above_one) {
    throw ConfigError(
        "budget: epsilon > 1 is outside the classical Gaussian-mechanism "
        "regime; set allow_epsilon_above_one to proceed anyway");
  }
}

double noise_sigma(double sensitivity, const PrivacyBudget& budget) {
  budget.validate();
  require(sensitivity >= 0.0, "noise_sigma: sensitivity must be non-negative");
  return sensitivity * std::sqrt(2.0 * std::log(1.25 / budget.delta)) /
         budget.epsilon;
}

namespace {

void validate_request(const ApproximatorStore& store, const Params& params,
                      const UnlearnRequest& request) {
  require(!request.forget_ids.empty(), "unlearn: empty request");
  for (std::size_t id : request.forget_ids) {
    if (!store.has(id)) {
      throw ConfigError("unlearn: id " + std::to_string(id) + " is not tracked");
    }
    if (store.is_consumed(id)) {
      throw ConfigError("unlearn: id " + std::to_string(id) +
                        " was already consumed by an earlier request");
    }
  }
  if (store.current_params_digest != params_digest(params)) {
    throw DigestError(
        "unlearn: store does not pair with these parameters (digest mismatch)");
  }
}

}  // namespace

UnlearnResult unlearn(const Params& params, ApproximatorStore& store,
                      const UnlearnRequest& request, const PrivacyBudget& budget,
                      const SensitivityEstimate& sensitivity, Rng& rng) {
  budget.validate();
  validate_request(store, params, request);
  require(sensitivity.value >= 0.0, "unlearn: negative sensitivity");
  if (sensitivity.mode == SensitivityEstimate::Mode::bound) {
    require(sensitivity.inputs.has_value(),
            "unlearn: bound-mode estimate lost its inputs");
  }

  // The timed phase is the pure summation + addition; it is repeated to
  // median jitter out of sub-millisecond readings.
  constexpr int kTimingReps = 5;
  std::array<long, kTimingReps> samples{};
  Vector clean_theta;
  for (int rep = 0; rep < kTimingReps; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    Vector sum = store.sum_rows(request.forget_ids);
    clean_theta = params.theta + sum;
    const auto t1 = std::chrono::steady_clock::now();
    samples[static_cast<std::size_t>(rep)] =
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
  }
  std::sort(samples.begin(), samples.end());

  UnlearnResult result;
  result.clean = make_params(params.spec, std::move(clean_theta));
  result.sigma = noise_sigma(sensitivity.value, budget);
  result.noise_seed = rng.next_u64();
  Rng noise_rng(result.noise_seed);
  const Vector noise =
      gaussian_vector(noise_rng, result.sigma, params.theta.size());
  result.noisy = make_params(params.spec, result.clean.theta + noise);
  result.consumed = request.forget_ids;
  std::sort(result.consumed.begin(), result.consumed.end());
  result.addition_time = std::chrono::nanoseconds(samples[kTimingReps / 2]);
  result.outside_classical_regime = budget.outside_classical_regime();

  store.mark_consumed(result.consumed);
  store.current_params_digest = params_digest(result.clean);
  return result;
}

std::vector<UnlearnResult> unlearn_sequential(
    const Params& params, ApproximatorStore& store,
    std::span<const UnlearnRequest> requests, const PrivacyBudget& budget,
    const SensitivityEstimate& sensitivity, Rng& rng) {
  std::vector<std::size_t> seen;
  for (const UnlearnRequest& request : requests) {
    for (std::size_t id : request.forget_ids) {
      if (std::find(seen.begin(), seen.end(), id) != seen.end()) {
        throw ConfigError("unlearn_sequential: id " + std::to_string(id) +
                          " appears in more than one request");
      }
      seen.push_back(id);
    }
  }
  std::vector<UnlearnResult> results;
  results.reserve(requests.size());
  Params current = params;
  for (const UnlearnRequest& request : requests) {
    results.push_back(unlearn(current, store, request, budget, sensitivity, rng));
    current = results.back().clean;
  }
  return results;
}

SensitivityEstimate sensitivity_oracle(const Params& retrained,
                                       const Params& learned,
                                       const Vector& approximator_sum) {
  require(retrained.theta.size() == learned.theta.size() &&
              learned.theta.size() == approximator_sum.size(),
          "sensitivity_oracle: dimension mismatch");
  SensitivityEstimate est;
  est.mode = SensitivityEstimate::Mode::oracle;
  est.value = (retrained.theta - learned.theta - approximator_sum).norm();
  return est;
}

SensitivityEstimate sensitivity_bound(const RegularityConstants& consts,
                                      double eta0, double q, long total_steps,
                                      int steps_per_epoch, int batch_size, int m) {
  const double rho = consts.rho;
  const double g = consts.grad_bound;
  require(g > 0.0, "sensitivity_bound: G must be positive");
  require(eta0 > 0.0 && total_steps >= 1 && steps_per_epoch >= 1 &&
              batch_size >= 1 && m >= 1,
          "sensitivity_bound: invalid arguments");
  if (!(q < rho && rho < 1.0)) {
    throw ConfigError(
        "sensitivity_bound: needs q < rho < 1 (got q=" + std::to_string(q) +
        ", rho=" + std::to_string(rho) +
        "); use a smaller step size or oracle-mode sensitivity");
  }
  const double t = static_cast<double>(total_steps);
  const double per_sample =
      2.0 * eta0 * g * (std::pow(rho, t) - std::pow(q, 2.0 * t)) *
      (eta0 * q / ((rho - q) * (rho - q * q)) +
       1.0 / (static_cast<double>(batch_size) * (rho - q)));

  SensitivityEstimate est;
  est.mode = SensitivityEstimate::Mode::bound;
  est.value = static_cast<double>(m) * per_sample;
  est.inputs = BoundInputs{eta0,       g,          q, rho, total_steps,
                           steps_per_epoch, batch_size, m};
  return est;
}

double deletion_capacity(const PrivacyBudget& budget, Index d, double rho,
                         long n, double eta0, double hidden_constant) {
  require(rho > 0.0 && rho <= 1.0, "deletion_capacity: rho must be in (0,1]");
  require(d >= 1 && n >= 1 && eta0 > 0.0 && hidden_constant > 0.0,
          "deletion_capacity: invalid arguments");
  require(budget.epsilon > 0.0 && budget.delta > 0.0 && budget.delta < 1.0,
          "deletion_capacity: invalid budget");
  return hidden_constant * budget.epsilon /
         (eta0 * std::sqrt(std::log(1.0 / budget.delta)) *
          std::sqrt(static_cast<double>(d)) *
          std::pow(rho, static_cast<double>(n)));
}

RepairResult repair(const ModelSpec& spec, const Dataset& remaining,
                    const Params& current, const ApproximatorStore& store,
                    const TrainConfig& repair_config,
                    const RecollectionConfig& rc) {
  require(rc.injection == RecollectionConfig::InjectionHessian::full_batch,
          "repair: leave-one-out injection is not a repair mode");
  std::vector<std::size_t> alive;
  for (std::size_t id : store.tracked()) {
    if (!store.is_consumed(id)) alive.push_back(id);
  }
  require(static_cast<Index>(alive.size()) == remaining.n,
          "repair: remaining dataset does not match the store's live rows");

  if (repair_config.epochs == 0) {
    RepairResult out{current, store, RecollectStats{}};
    return out;
  }

  RowMatrix initial(static_cast<Index>(alive.size()), store.dim());
  for (std::size_t i = 0; i < alive.size(); ++i) {
    initial.row(static_cast<Index>(i)) = store.rows().row(store.row_index(alive[i]));
  }

  const BatchSchedule schedule = build_schedule(
      remaining.n, repair_config.batch_size, repair_config.epochs,
      repair_config.eta0, repair_config.decay, repair_config.seed);
  RecollectionConfig repair_rc = rc;
  repair_rc.tracked.clear();  // track every remaining id
  RecollectResult run = recollect_continue(spec, remaining, schedule,
                                           repair_config, repair_rc, current,
                                           initial);
  return RepairResult{std::move(run.params), std::move(run.store), run.stats};
}

}  // namespace hfu
