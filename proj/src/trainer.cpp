#include "hfu/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "hfu/numkit.hpp"

namespace hfu {

uint64_t TrainConfig::digest() const {
  Fnv1a h;
  h.update_value(eta0);
  h.update_value(decay);
  h.update_value(static_cast<int64_t>(epochs));
  h.update_value(static_cast<int64_t>(batch_size));
  h.update_value(static_cast<uint8_t>(clip_threshold.has_value()));
  h.update_value(clip_threshold.value_or(0.0));
  h.update_value(seed);
  return h.digest();
}

Params init_params(const ModelSpec& spec, uint64_t seed) {
  const Index d = spec.parameter_count();
  Vector theta(d);
  Rng rng = Rng(seed).long_jumped(1);
  const auto draw = [&](double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    return (2.0 * rng.next_double() - 1.0) * bound;
  };
  if (spec.kind == ModelKind::mlp2) {
    const Index split = spec.hidden * (spec.input_dim + 1);
    for (Index i = 0; i < split; ++i) theta[i] = draw(static_cast<double>(spec.input_dim));
    for (Index i = split; i < d; ++i) theta[i] = draw(static_cast<double>(spec.hidden));
  } else {
    for (Index i = 0; i < d; ++i) theta[i] = draw(static_cast<double>(spec.input_dim));
  }
  return make_params(spec, std::move(theta));
}

Vector clip(const Vector& g, double threshold) {
  require(threshold > 0.0, "clip: threshold must be positive");
  const double norm = g.norm();
  if (norm <= threshold) return g;
  return g * (threshold / norm);
}

namespace {

void check_config(const ModelSpec& spec, const Dataset& ds,
                  const BatchSchedule& schedule, const TrainConfig& config,
                  const Params& init) {
  require(schedule.n == ds.n, "train: schedule built for a different n");
  require(init.theta.size() == spec.parameter_count(),
          "train: init length does not match spec");
  require(schedule.eta0 == config.eta0 && schedule.decay == config.decay &&
              schedule.epochs == config.epochs &&
              schedule.batch_size == config.batch_size &&
              schedule.seed == config.seed,
          "train: schedule does not match config");
  require(config.decay > 0.0 && config.decay <= 1.0,
          "train: decay must be in (0,1]");
}

std::pair<Params, Trajectory> run_sgd(const ModelSpec& spec, const Dataset& ds,
                                      const BatchSchedule& schedule,
                                      const TrainConfig& config,
                                      const Params& init,
                                      const RemovalView* view,
                                      const StepHook& hook) {
  check_config(spec, ds, schedule, config, init);

  Params params = make_params(spec, init.theta);
  Trajectory traj;
  traj.schedule = std::make_shared<BatchSchedule>(schedule);
  traj.provenance = Provenance{ds.digest, schedule.digest(), config.digest(),
                               digest_of({init.theta.data(),
                                          static_cast<std::size_t>(init.theta.size())})};
  traj.records.reserve(static_cast<std::size_t>(schedule.total_steps()));

  std::vector<std::size_t> included;
  std::vector<Vector> grads;
  long t = 0;
  for (int e = 0; e < schedule.epochs; ++e) {
    const auto& epoch = schedule.batches[static_cast<std::size_t>(e)];
    for (int b = 0; b < static_cast<int>(epoch.size()); ++b, ++t) {
      const std::vector<std::size_t>& batch = epoch[static_cast<std::size_t>(b)];
      const double eta = schedule.step_size(e, b);
      const double divisor = static_cast<double>(batch.size());

      included.clear();
      for (std::size_t id : batch) {
        if (view == nullptr || !view->is_removed(id)) included.push_back(id);
      }

      grads.clear();
      grads.reserve(included.size());
      Vector sum = Vector::Zero(params.theta.size());
      for (std::size_t id : included) {
        Vector g = grad_one(params, ds.examples.at(id));
        if (!g.allFinite()) {
          throw DivergenceError("train: non-finite gradient at step " +
                                std::to_string(t) + " (epoch " + std::to_string(e) +
                                ", batch " + std::to_string(b) + ")");
        }
        if (config.clip_threshold && g.norm() > *config.clip_threshold) {
          g = clip(g, *config.clip_threshold);
          ++traj.clip_events;
        }
        traj.observed_max_grad = std::max(traj.observed_max_grad, g.norm());
        sum += g;
        grads.push_back(std::move(g));
      }

      StepRecord record{e, b, t, eta, std::nullopt};
      if (config.record_trajectory) record.params_before = params.theta;

      if (hook) {
        const HvpContext hessian(params, ds, batch);
        hook(StepContext{record, params, batch, hessian, grads, divisor});
      }

      params.theta -= (eta / divisor) * sum;
      if (!params.theta.allFinite()) {
        throw DivergenceError("train: non-finite parameters after step " +
                              std::to_string(t));
      }
      traj.records.push_back(std::move(record));
    }
  }
  traj.final_params = params;
  return {std::move(params), std::move(traj)};
}

}  // namespace

std::pair<Params, Trajectory> train(const ModelSpec& spec, const Dataset& ds,
                                    const BatchSchedule& schedule,
                                    const TrainConfig& config, const Params& init,
                                    const StepHook& hook) {
  return run_sgd(spec, ds, schedule, config, init, nullptr, hook);
}

std::pair<Params, Trajectory> retrain(const ModelSpec& spec, const Dataset& ds,
                                      const RemovalView& view,
                                      const TrainConfig& config, const Params& init,
                                      const Provenance* learned) {
  require(view.base != nullptr, "retrain: removal view has no schedule");
  if (learned != nullptr) {
    const Provenance here{ds.digest, view.base->digest(), config.digest(),
                          digest_of({init.theta.data(),
                                     static_cast<std::size_t>(init.theta.size())})};
    if (here.dataset_digest != learned->dataset_digest) {
      throw DigestError("retrain: dataset digest differs from the learning run");
    }
    if (here.schedule_digest != learned->schedule_digest) {
      throw DigestError("retrain: schedule digest differs from the learning run");
    }
    if (here.config_digest != learned->config_digest) {
      throw DigestError("retrain: config digest differs from the learning run");
    }
    if (here.init_digest != learned->init_digest) {
      throw DigestError("retrain: initialization differs from the learning run");
    }
  }
  return run_sgd(spec, ds, *view.base, config, init, &view, {});
}

namespace {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_trajectory(const Trajectory& traj, const ModelSpec& spec,
                     const TrainConfig& config,
                     const std::filesystem::path& path) {
  require(traj.schedule != nullptr, "trajectory: no schedule to save");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("trajectory: cannot write " + path.string());
  out.write("HFTJ", 4);
  write_pod<uint32_t>(out, 1);
  write_pod<uint32_t>(out, static_cast<uint32_t>(spec.kind));
  write_pod<uint64_t>(out, static_cast<uint64_t>(spec.input_dim));
  write_pod<uint64_t>(out, static_cast<uint64_t>(spec.classes));
  write_pod<uint64_t>(out, static_cast<uint64_t>(spec.hidden));
  write_pod<double>(out, spec.l2_coeff);
  write_pod<double>(out, config.eta0);
  write_pod<double>(out, config.decay);
  write_pod<int64_t>(out, config.epochs);
  write_pod<int64_t>(out, config.batch_size);
  write_pod<uint8_t>(out, config.clip_threshold.has_value() ? 1 : 0);
  write_pod<double>(out, config.clip_threshold.value_or(0.0));
  write_pod<uint64_t>(out, config.seed);
  write_pod<uint64_t>(out, static_cast<uint64_t>(traj.schedule->n));
  write_pod<uint64_t>(out, traj.provenance.dataset_digest);
  write_pod<uint64_t>(out, traj.provenance.schedule_digest);
  write_pod<uint64_t>(out, traj.provenance.config_digest);
  write_pod<uint64_t>(out, traj.provenance.init_digest);
  write_pod<double>(out, traj.observed_max_grad);
  write_pod<int64_t>(out, traj.clip_events);

  const uint64_t d = static_cast<uint64_t>(traj.final_params.theta.size());
  write_pod<uint64_t>(out, static_cast<uint64_t>(traj.records.size()));
  write_pod<uint64_t>(out, d);
  for (const StepRecord& record : traj.records) {
    write_pod<int64_t>(out, record.epoch);
    write_pod<int64_t>(out, record.batch);
    write_pod<int64_t>(out, record.step);
    write_pod<double>(out, record.eta);
    write_pod<uint8_t>(out, record.params_before.has_value() ? 1 : 0);
    if (record.params_before) {
      out.write(reinterpret_cast<const char*>(record.params_before->data()),
                static_cast<std::streamsize>(sizeof(double) * d));
    }
  }
  out.write(reinterpret_cast<const char*>(traj.final_params.theta.data()),
            static_cast<std::streamsize>(sizeof(double) * d));
  if (!out) throw IoError("trajectory: short write to " + path.string());
}

TrajectoryFile load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("trajectory: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HFTJ", 4) != 0) {
    throw IoError("trajectory: bad magic in " + path.string());
  }
  if (read_pod<uint32_t>(in) != 1) throw IoError("trajectory: unsupported version");

  TrajectoryFile file;
  file.spec.kind = static_cast<ModelKind>(read_pod<uint32_t>(in));
  file.spec.input_dim = static_cast<Index>(read_pod<uint64_t>(in));
  file.spec.classes = static_cast<int>(read_pod<uint64_t>(in));
  file.spec.hidden = static_cast<Index>(read_pod<uint64_t>(in));
  file.spec.l2_coeff = read_pod<double>(in);
  file.config.eta0 = read_pod<double>(in);
  file.config.decay = read_pod<double>(in);
  file.config.epochs = static_cast<int>(read_pod<int64_t>(in));
  file.config.batch_size = static_cast<int>(read_pod<int64_t>(in));
  const bool has_clip = read_pod<uint8_t>(in) != 0;
  const double clip_value = read_pod<double>(in);
  if (has_clip) file.config.clip_threshold = clip_value;
  file.config.seed = read_pod<uint64_t>(in);
  file.config.record_trajectory = true;
  const Index n = static_cast<Index>(read_pod<uint64_t>(in));

  Trajectory& traj = file.trajectory;
  traj.provenance.dataset_digest = read_pod<uint64_t>(in);
  traj.provenance.schedule_digest = read_pod<uint64_t>(in);
  traj.provenance.config_digest = read_pod<uint64_t>(in);
  traj.provenance.init_digest = read_pod<uint64_t>(in);
  traj.observed_max_grad = read_pod<double>(in);
  traj.clip_events = read_pod<int64_t>(in);
  if (!in) throw IoError("trajectory: corrupt header");

  // the schedule is a pure function of its tuple; rebuild and cross-check
  const BatchSchedule schedule =
      build_schedule(n, file.config.batch_size, file.config.epochs,
                     file.config.eta0, file.config.decay, file.config.seed);
  if (schedule.digest() != traj.provenance.schedule_digest) {
    throw DigestError("trajectory: rebuilt schedule does not match the recorded digest");
  }
  traj.schedule = std::make_shared<BatchSchedule>(schedule);

  const uint64_t count = read_pod<uint64_t>(in);
  const uint64_t d = read_pod<uint64_t>(in);
  traj.records.resize(count);
  for (uint64_t i = 0; i < count; ++i) {
    StepRecord& record = traj.records[i];
    record.epoch = static_cast<int>(read_pod<int64_t>(in));
    record.batch = static_cast<int>(read_pod<int64_t>(in));
    record.step = read_pod<int64_t>(in);
    record.eta = read_pod<double>(in);
    if (read_pod<uint8_t>(in) != 0) {
      Vector theta(static_cast<Index>(d));
      in.read(reinterpret_cast<char*>(theta.data()),
              static_cast<std::streamsize>(sizeof(double) * d));
      record.params_before = std::move(theta);
    }
    if (!in) throw IoError("trajectory: truncated at step " + std::to_string(i));
  }
  Vector final_theta(static_cast<Index>(d));
  in.read(reinterpret_cast<char*>(final_theta.data()),
          static_cast<std::streamsize>(sizeof(double) * d));
  if (!in) throw IoError("trajectory: truncated final parameters");
  traj.final_params = make_params(file.spec, std::move(final_theta));
  return file;
}

const Vector& trajectory_params_at(const Trajectory& traj, long step) {
  const long total = static_cast<long>(traj.records.size());
  require(step >= 0 && step <= total, "trajectory_params_at: step out of range");
  if (step == total) return traj.final_params.theta;
  const auto& record = traj.records[static_cast<std::size_t>(step)];
  require(record.params_before.has_value(),
          "trajectory_params_at: trajectory was not recorded");
  return *record.params_before;
}

TrajectoryGapReport trajectory_gap_check(const Trajectory& learn, const Trajectory& retrain,
                            double grad_bound, double eta0, double q) {
  require(learn.records.size() == retrain.records.size(),
          "trajectory_gap_check: trajectories have different lengths");
  require(grad_bound > 0.0, "trajectory_gap_check: G must be positive");
  require(q > 0.0 && q <= 1.0, "trajectory_gap_check: q must be in (0,1]");

  TrajectoryGapReport report;
  report.holds = true;
  const long total = static_cast<long>(learn.records.size());
  for (long t = 1; t <= total; ++t) {
    const double lhs =
        (trajectory_params_at(retrain, t) - trajectory_params_at(learn, t)).norm();
    const double bound =
        q < 1.0 ? 2.0 * eta0 * grad_bound * (1.0 - std::pow(q, static_cast<double>(t))) /
                      (1.0 - q)
                : 2.0 * eta0 * grad_bound * static_cast<double>(t);
    const double ratio = lhs / bound;
    ++report.steps_checked;
    if (ratio > report.max_ratio) report.max_ratio = ratio;
    if (ratio > 1.0 && report.first_violation < 0) {
      report.first_violation = t;
      report.holds = false;
    }
  }
  return report;
}

}  // namespace hfu
