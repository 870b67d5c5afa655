#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hfu/common.hpp"
#include "hfu/data.hpp"
#include "hfu/model.hpp"

namespace hfu {

struct TrainConfig {
  double eta0 = 0.0;
  double decay = 1.0;  // q in (0,1]
  int epochs = 0;
  int batch_size = 0;
  std::optional<double> clip_threshold;
  uint64_t seed = 0;
  bool record_trajectory = false;

  uint64_t digest() const;
};

struct StepRecord {
  int epoch = 0;
  int batch = 0;
  long step = 0;  // t = e*B + b
  double eta = 0.0;
  std::optional<Vector> params_before;  // present iff record_trajectory
};

// Identifies the learning run a retrain/unlearn artifact must pair with.
struct Provenance {
  uint64_t dataset_digest = 0;
  uint64_t schedule_digest = 0;
  uint64_t config_digest = 0;
  uint64_t init_digest = 0;
};

struct Trajectory {
  std::shared_ptr<const BatchSchedule> schedule;
  std::vector<StepRecord> records;
  Params final_params;
  Provenance provenance;
  double observed_max_grad = 0.0;  // max per-sample norm entering updates
  long clip_events = 0;
};

// Step hook contract: invoked with w_{e,b} and the batch Hessian context
// before the parameter write; clipped_grads are exactly the per-sample
// gradients the update consumes, aligned with `batch`.
struct StepContext {
  const StepRecord& record;
  const Params& params;
  std::span<const std::size_t> batch;
  const HvpContext& hessian;
  std::span<const Vector> clipped_grads;
  double divisor;  // |B_{e,b}| of the base schedule
};

using StepHook = std::function<void(const StepContext&)>;

// Scaled-uniform initialization in +-1/sqrt(fan_in), drawn from the seed's
// initialization stream; learning and retraining must share it.
Params init_params(const ModelSpec& spec, uint64_t seed);

// g when ||g|| <= threshold, else g * threshold/||g||.
Vector clip(const Vector& g, double threshold);

std::pair<Params, Trajectory> train(const ModelSpec& spec, const Dataset& ds,
                                    const BatchSchedule& schedule,
                                    const TrainConfig& config,
                                    const Params& init,
                                    const StepHook& hook = {});

// Same loop with removed ids dropped from gradient sums; divisors, batches
// and step sizes are untouched. Pass the learning run's provenance to
// enforce the shared-initialization pairing.
std::pair<Params, Trajectory> retrain(const ModelSpec& spec, const Dataset& ds,
                                      const RemovalView& view,
                                      const TrainConfig& config,
                                      const Params& init,
                                      const Provenance* learned = nullptr);

struct TrajectoryGapReport {
  bool holds = false;
  double max_ratio = 0.0;
  long steps_checked = 0;
  long first_violation = -1;
};

// Checks ||w^{-U}_t - w_t|| <= 2*eta0*G*(1-q^t)/(1-q) at every recorded
// step (limit form 2*eta0*G*t when q = 1).
TrajectoryGapReport trajectory_gap_check(const Trajectory& learn, const Trajectory& retrain,
                            double grad_bound, double eta0, double q);

// Step-indexed parameters: records[t].params_before for t < T, final at T.
const Vector& trajectory_params_at(const Trajectory& traj, long step);

struct TrajectoryFile {
  ModelSpec spec;
  TrainConfig config;
  Trajectory trajectory;
};

// "HFTJ" checkpoint container: per-step headers with the recorded
// parameters, feeding offline recollection. The schedule is rebuilt from
// its defining tuple and cross-checked against the stored digest.
void save_trajectory(const Trajectory& traj, const ModelSpec& spec,
                     const TrainConfig& config,
                     const std::filesystem::path& path);
TrajectoryFile load_trajectory(const std::filesystem::path& path);

}  // namespace hfu
