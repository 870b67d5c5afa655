#include "hfu/baselines.hpp"

#include <chrono>

#include "hfu/numkit.hpp"

namespace hfu {

void BaselineConfig::validate(const ModelSpec& spec) const {
  require(damping >= 0.0, "baselines: damping must be >= 0");
  if (spec.l2_coeff == 0.0) {
    require(damping > 0.0,
            "baselines: damping must be strictly positive without an L2 term");
  }
}

TimedParams retrain_baseline(const ModelSpec& spec, const Dataset& ds,
                             const BatchSchedule& schedule,
                             std::span<const std::size_t> removed,
                             const TrainConfig& config, const Params& init,
                             const Provenance* learned) {
  const RemovalView view = restrict(schedule, removed);
  const auto t0 = std::chrono::steady_clock::now();
  auto [params, traj] = retrain(spec, ds, view, config, init, learned);
  const auto t1 = std::chrono::steady_clock::now();
  return TimedParams{std::move(params),
                     std::chrono::duration<double>(t1 - t0).count()};
}

namespace {

Params hessian_solve_update(const Params& w_hat, const Dataset& ds,
                            std::span<const std::size_t> forget, double damping,
                            Index cap, bool newton) {
  require(damping >= 0.0, "baselines: damping must be >= 0");
  if (forget.empty()) return w_hat;
  const auto n = static_cast<double>(ds.n);
  const auto m = static_cast<double>(forget.size());
  require(ds.n > static_cast<Index>(forget.size()),
          "baselines: cannot forget the whole dataset");

  const auto all = ds.all_ids();
  Matrix system = full_hessian(w_hat, ds, all, cap);
  if (newton) {
    // (sum_i H_i - sum_U H_j) / (n - m)
    const Matrix forget_h = full_hessian(w_hat, ds, forget, cap);
    system = (n * system - m * forget_h) / (n - m);
  }
  system.diagonal().array() += damping;

  const Vector rhs = m * grad(w_hat, ds, forget);  // sum of forget gradients
  Eigen::LDLT<Matrix> solver(system);
  if (solver.info() != Eigen::Success) {
    throw Error("baselines: damped Hessian solve failed (matrix not positive "
                "definite; smallest eigenvalue likely below -" +
                std::to_string(damping) + ")");
  }
  Vector delta = solver.solve(rhs);
  if (!delta.allFinite()) {
    throw Error("baselines: Hessian solve produced non-finite update");
  }
  const double scale = newton ? 1.0 / (n - m) : 1.0 / n;
  return make_params(w_hat.spec, w_hat.theta + scale * delta);
}

}  // namespace

Params newton_step(const Params& w_hat, const Dataset& ds,
                   std::span<const std::size_t> forget, double damping,
                   Index cap) {
  return hessian_solve_update(w_hat, ds, forget, damping, cap, true);
}

Params infinitesimal_jackknife(const Params& w_hat, const Dataset& ds,
                               std::span<const std::size_t> forget,
                               double damping, Index cap) {
  return hessian_solve_update(w_hat, ds, forget, damping, cap, false);
}

Params finetune(const Params& start, const Dataset& remaining,
                const TrainConfig& config) {
  require(config.epochs >= 1, "finetune: needs at least one epoch");
  const BatchSchedule schedule =
      build_schedule(remaining.n, config.batch_size, config.epochs, config.eta0,
                     config.decay, config.seed);
  auto [params, traj] = train(start.spec, remaining, schedule, config, start);
  return std::move(params);
}

Params neggrad(const Params& start, const Dataset& forget,
               const TrainConfig& config) {
  require(config.epochs >= 1, "neggrad: needs at least one epoch");
  const BatchSchedule schedule =
      build_schedule(forget.n, config.batch_size, config.epochs, config.eta0,
                     config.decay, config.seed);
  Params params = start;
  long t = 0;
  for (int e = 0; e < schedule.epochs; ++e) {
    const auto& epoch = schedule.batches[static_cast<std::size_t>(e)];
    for (int b = 0; b < static_cast<int>(epoch.size()); ++b, ++t) {
      const auto& batch = epoch[static_cast<std::size_t>(b)];
      Vector sum = Vector::Zero(params.theta.size());
      for (std::size_t id : batch) {
        Vector g = grad_one(params, forget.examples.at(id));
        if (!g.allFinite()) {
          throw DivergenceError("neggrad: non-finite gradient at step " +
                                std::to_string(t));
        }
        if (config.clip_threshold && g.norm() > *config.clip_threshold) {
          g = clip(g, *config.clip_threshold);
        }
        sum += g;
      }
      // ascent: sign-flipped SGD on the forget set
      params.theta += (schedule.step_size(e, b) / static_cast<double>(batch.size())) * sum;
      if (!params.theta.allFinite()) {
        throw DivergenceError("neggrad: non-finite parameters after step " +
                              std::to_string(t));
      }
    }
  }
  return params;
}

}  // namespace hfu
