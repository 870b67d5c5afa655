#include "hfu/recollection.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <mutex>
#include <thread>

namespace hfu {

ApproximatorStore::ApproximatorStore(std::vector<std::size_t> tracked_sorted,
                                     Index dim, StoreMeta meta)
    : tracked_(std::move(tracked_sorted)),
      consumed_(tracked_.size(), 0),
      rows_(RowMatrix::Zero(static_cast<Index>(tracked_.size()), dim)),
      meta_(meta) {
  require(std::is_sorted(tracked_.begin(), tracked_.end()) &&
              std::adjacent_find(tracked_.begin(), tracked_.end()) == tracked_.end(),
          "store: tracked ids must be sorted and unique");
  current_params_digest = meta.final_params_digest;
}

bool ApproximatorStore::has(std::size_t id) const {
  return std::binary_search(tracked_.begin(), tracked_.end(), id);
}

Index ApproximatorStore::row_index(std::size_t id) const {
  const auto it = std::lower_bound(tracked_.begin(), tracked_.end(), id);
  require(it != tracked_.end() && *it == id, "store: id not tracked");
  return static_cast<Index>(it - tracked_.begin());
}

Vector ApproximatorStore::row(std::size_t id) const {
  return rows_.row(row_index(id)).transpose();
}

Vector ApproximatorStore::sum_rows(std::span<const std::size_t> ids) const {
  std::vector<std::size_t> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  Vector sum = Vector::Zero(dim());
  for (std::size_t id : sorted) sum += rows_.row(row_index(id)).transpose();
  return sum;
}

bool ApproximatorStore::is_consumed(std::size_t id) const {
  return consumed_[static_cast<std::size_t>(row_index(id))] != 0;
}

void ApproximatorStore::mark_consumed(std::span<const std::size_t> ids) {
  for (std::size_t id : ids) consumed_[static_cast<std::size_t>(row_index(id))] = 1;
}

std::vector<std::size_t> ApproximatorStore::consumed_ids() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tracked_.size(); ++i) {
    if (consumed_[i]) out.push_back(tracked_[i]);
  }
  return out;
}

namespace {

std::vector<std::size_t> resolve_tracked(const Dataset& ds,
                                         const RecollectionConfig& rc) {
  std::vector<std::size_t> tracked =
      rc.tracked.empty() ? ds.all_ids() : rc.tracked;
  std::sort(tracked.begin(), tracked.end());
  tracked.erase(std::unique(tracked.begin(), tracked.end()), tracked.end());
  for (std::size_t id : tracked) {
    require(id < static_cast<std::size_t>(ds.n), "recollection: unknown tracked id");
  }
  if (rc.injection == RecollectionConfig::InjectionHessian::leave_one_out) {
    require(tracked.size() == 1,
            "recollection: leave-one-out injection is a single-sample diagnostic");
  }
  return tracked;
}

// One recursion step over all tracked rows: multiply by (I - eta*H), then
// add the per-sample injections for batch members.
class Engine {
 public:
  Engine(const RecollectionConfig& rc, std::vector<std::size_t> tracked, Index dim)
      : rc_(rc), tracked_(std::move(tracked)) {
    rows_ = RowMatrix::Zero(static_cast<Index>(tracked_.size()), dim);
  }

  void seed_rows(const RowMatrix& initial) {
    require(initial.rows() == rows_.rows() && initial.cols() == rows_.cols(),
            "recollection: initial rows shape mismatch");
    rows_ = initial;
  }

  void step(const StepContext& ctx) {
    const double eta = ctx.record.eta;
    const bool leave_one_out =
        rc_.injection == RecollectionConfig::InjectionHessian::leave_one_out;

    const auto multiply_range = [&](Index begin, Index end) {
      for (Index r = begin; r < end; ++r) {
        const Vector v = rows_.row(r).transpose();
        Vector hv;
        if (leave_one_out && in_batch(ctx.batch, tracked_[static_cast<std::size_t>(r)])) {
          hv = ctx.hessian.apply_excluding(v, tracked_[static_cast<std::size_t>(r)]);
        } else {
          hv = ctx.hessian.apply(v);
        }
        rows_.row(r) = (v - eta * hv).transpose();
      }
    };

    const Index count = rows_.rows();
    const int width = std::max(1, rc_.parallel_width);
    if (width == 1 || count < 2) {
      multiply_range(0, count);
    } else {
      std::vector<std::thread> workers;
      std::exception_ptr first_error;
      std::mutex error_mutex;
      const Index chunk = (count + width - 1) / width;
      for (int w = 0; w < width; ++w) {
        const Index begin = std::min<Index>(count, w * chunk);
        const Index end = std::min<Index>(count, begin + chunk);
        if (begin >= end) break;
        workers.emplace_back([&, begin, end] {
          try {
            multiply_range(begin, end);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        });
      }
      for (auto& worker : workers) worker.join();
      if (first_error) std::rethrow_exception(first_error);
    }
    stats_.hvp_applications += count;

    for (std::size_t k = 0; k < ctx.batch.size(); ++k) {
      const std::size_t id = ctx.batch[k];
      const auto it = std::lower_bound(tracked_.begin(), tracked_.end(), id);
      if (it == tracked_.end() || *it != id) continue;
      const Index r = static_cast<Index>(it - tracked_.begin());
      rows_.row(r) += (eta / ctx.divisor) * ctx.clipped_grads[k].transpose();
      ++stats_.injections;
    }

    double max_norm = 0.0;
    for (Index r = 0; r < count; ++r) {
      max_norm = std::max(max_norm, rows_.row(r).norm());
    }
    stats_.max_row_norm = std::max(stats_.max_row_norm, max_norm);
    if (!std::isfinite(max_norm)) {
      throw DivergenceError("recollection: non-finite approximator at step " +
                            std::to_string(ctx.record.step));
    }
    if (max_norm > kDivergenceGuard) {
      throw DivergenceError(
          "recollection: approximator norm " + std::to_string(max_norm) +
          " exceeded guard at step " + std::to_string(ctx.record.step) +
          " (recursion multiplier has spectral radius >= 1; reduce the step size)");
    }
  }

  RowMatrix&& take_rows() { return std::move(rows_); }
  const std::vector<std::size_t>& tracked() const { return tracked_; }
  const RecollectStats& stats() const { return stats_; }

 private:
  static bool in_batch(std::span<const std::size_t> batch, std::size_t id) {
    return std::find(batch.begin(), batch.end(), id) != batch.end();
  }

  const RecollectionConfig& rc_;
  std::vector<std::size_t> tracked_;
  RowMatrix rows_;
  RecollectStats stats_;
};

RecollectResult run_streaming(const ModelSpec& spec, const Dataset& ds,
                              const BatchSchedule& schedule,
                              const TrainConfig& config,
                              const RecollectionConfig& rc, const Params& init,
                              const RowMatrix* initial_rows) {
  Engine engine(rc, resolve_tracked(ds, rc), spec.parameter_count());
  if (initial_rows != nullptr) engine.seed_rows(*initial_rows);

  auto [params, trajectory] =
      train(spec, ds, schedule, config, init,
            [&engine](const StepContext& ctx) { engine.step(ctx); });

  StoreMeta meta;
  meta.dataset_digest = ds.digest;
  meta.schedule_digest = schedule.digest();
  meta.config_digest = config.digest();
  meta.final_params_digest = params_digest(params);
  meta.mode = StoreMeta::Mode::streaming;

  ApproximatorStore store(engine.tracked(), spec.parameter_count(), meta);
  store.mutable_rows() = engine.take_rows();
  return RecollectResult{std::move(params), std::move(store),
                         std::move(trajectory), engine.stats()};
}

}  // namespace

RecollectResult recollect_streaming(const ModelSpec& spec, const Dataset& ds,
                                    const BatchSchedule& schedule,
                                    const TrainConfig& config,
                                    const RecollectionConfig& rc) {
  return run_streaming(spec, ds, schedule, config, rc,
                       init_params(spec, config.seed), nullptr);
}

RecollectResult recollect_continue(const ModelSpec& spec, const Dataset& ds,
                                   const BatchSchedule& schedule,
                                   const TrainConfig& config,
                                   const RecollectionConfig& rc,
                                   const Params& start,
                                   const RowMatrix& initial_rows) {
  return run_streaming(spec, ds, schedule, config, rc, start, &initial_rows);
}

OfflineRecollectResult recollect_from_trajectory(const ModelSpec& spec,
                                                 const Dataset& ds,
                                                 const Trajectory& trajectory,
                                                 const TrainConfig& config,
                                                 const RecollectionConfig& rc) {
  require(trajectory.schedule != nullptr, "recollection: trajectory has no schedule");
  const BatchSchedule& schedule = *trajectory.schedule;
  require(trajectory.provenance.dataset_digest == ds.digest,
          "recollection: trajectory was recorded on a different dataset");
  const long total = schedule.total_steps();
  require(static_cast<long>(trajectory.records.size()) == total,
          "recollection: trajectory is truncated");

  Engine engine(rc, resolve_tracked(ds, rc), spec.parameter_count());
  std::vector<Vector> grads;
  for (const StepRecord& record : trajectory.records) {
    if (!record.params_before.has_value()) {
      throw ConfigError("recollection: missing checkpoint at step " +
                        std::to_string(record.step));
    }
    const Params params = make_params(spec, *record.params_before);
    const auto& batch =
        schedule.batches[static_cast<std::size_t>(record.epoch)]
                        [static_cast<std::size_t>(record.batch)];
    const HvpContext hessian(params, ds, batch);
    grads.clear();
    grads.reserve(batch.size());
    for (std::size_t id : batch) {
      Vector g = grad_one(params, ds.examples.at(id));
      if (config.clip_threshold && g.norm() > *config.clip_threshold) {
        g = clip(g, *config.clip_threshold);
      }
      grads.push_back(std::move(g));
    }
    engine.step(StepContext{record, params, batch, hessian, grads,
                            static_cast<double>(batch.size())});
  }

  StoreMeta meta;
  meta.dataset_digest = ds.digest;
  meta.schedule_digest = schedule.digest();
  meta.config_digest = config.digest();
  meta.final_params_digest = params_digest(trajectory.final_params);
  meta.mode = StoreMeta::Mode::from_trajectory;

  ApproximatorStore store(engine.tracked(), spec.parameter_count(), meta);
  store.mutable_rows() = engine.take_rows();
  return OfflineRecollectResult{std::move(store), engine.stats()};
}

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
uint32_t read_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t read_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

uint64_t rows_digest(const RowMatrix& rows) {
  Fnv1a h;
  h.update(rows.data(), sizeof(double) * static_cast<std::size_t>(rows.size()));
  return h.digest();
}

}  // namespace

std::size_t store_file_overhead(std::size_t n_tracked, std::size_t n_consumed) {
  // magic + version + n + d + ids, digest footer (4 x 16 hex), mode byte,
  // current-params digest, payload digest, tombstone count + ids.
  return 4 + 4 + 8 + 8 + 8 * n_tracked + 64 + 1 + 16 + 16 + 8 + 8 * n_consumed;
}

void store_save(const ApproximatorStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("store: cannot write " + path.string());
  out.write("HFUN", 4);
  write_u32(out, 1);
  write_u64(out, store.row_count());
  write_u64(out, static_cast<uint64_t>(store.dim()));
  for (std::size_t id : store.tracked()) write_u64(out, id);
  const RowMatrix& rows = store.rows();
  out.write(reinterpret_cast<const char*>(rows.data()),
            static_cast<std::streamsize>(sizeof(double) *
                                         static_cast<std::size_t>(rows.size())));
  const StoreMeta& meta = store.meta();
  out << digest_hex(meta.dataset_digest) << digest_hex(meta.schedule_digest)
      << digest_hex(meta.config_digest) << digest_hex(meta.final_params_digest);
  const uint8_t mode = static_cast<uint8_t>(meta.mode);
  out.write(reinterpret_cast<const char*>(&mode), 1);
  out << digest_hex(store.current_params_digest);
  out << digest_hex(rows_digest(rows));
  const auto consumed = store.consumed_ids();
  write_u64(out, consumed.size());
  for (std::size_t id : consumed) write_u64(out, id);
  if (!out) throw IoError("store: short write to " + path.string());
}

namespace {

uint64_t read_hex_digest(std::istream& in, const std::string& what) {
  char buf[16];
  in.read(buf, 16);
  if (!in) throw IoError("store: truncated while reading " + what);
  uint64_t v = 0;
  for (char c : buf) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<uint64_t>(c - 'a' + 10);
    else throw IoError("store: corrupt digest footer");
  }
  return v;
}

}  // namespace

ApproximatorStore store_load(const std::filesystem::path& path,
                             const StoreMeta* expected, bool* digest_warning) {
  if (digest_warning != nullptr) *digest_warning = false;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("store: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HFUN", 4) != 0) {
    throw IoError("store: bad magic in " + path.string());
  }
  const uint32_t version = read_u32(in);
  if (version != 1) throw IoError("store: unsupported version");
  const uint64_t n = read_u64(in);
  const uint64_t d = read_u64(in);
  if (!in) throw IoError("store: corrupt header");
  std::vector<std::size_t> tracked(n);
  for (uint64_t i = 0; i < n; ++i) tracked[i] = read_u64(in);
  RowMatrix rows(static_cast<Index>(n), static_cast<Index>(d));
  in.read(reinterpret_cast<char*>(rows.data()),
          static_cast<std::streamsize>(sizeof(double) * n * d));
  if (!in) throw IoError("store: truncated payload");

  StoreMeta meta;
  meta.dataset_digest = read_hex_digest(in, "dataset digest");
  meta.schedule_digest = read_hex_digest(in, "schedule digest");
  meta.config_digest = read_hex_digest(in, "config digest");
  meta.final_params_digest = read_hex_digest(in, "final-params digest");
  uint8_t mode = 0;
  in.read(reinterpret_cast<char*>(&mode), 1);
  if (!in || mode > 1) throw IoError("store: corrupt footer");
  meta.mode = static_cast<StoreMeta::Mode>(mode);
  const uint64_t current_digest = read_hex_digest(in, "current-params digest");
  const uint64_t payload_digest = read_hex_digest(in, "payload digest");
  const uint64_t consumed_count = read_u64(in);
  std::vector<std::size_t> consumed(consumed_count);
  for (uint64_t i = 0; i < consumed_count; ++i) consumed[i] = read_u64(in);
  if (!in) throw IoError("store: truncated tombstone section");

  ApproximatorStore store(std::move(tracked), static_cast<Index>(d), meta);
  store.mutable_rows() = std::move(rows);
  store.mark_consumed(consumed);
  store.current_params_digest = current_digest;

  const bool payload_ok = rows_digest(store.rows()) == payload_digest;
  bool expected_ok = true;
  if (expected != nullptr) {
    expected_ok = expected->dataset_digest == meta.dataset_digest &&
                  expected->schedule_digest == meta.schedule_digest &&
                  expected->config_digest == meta.config_digest &&
                  expected->final_params_digest == meta.final_params_digest;
  }
  if (digest_warning != nullptr) *digest_warning = !(payload_ok && expected_ok);
  return store;
}

ComplexityReport complexity_report(Index n, Index d, int epochs,
                                   int steps_per_epoch, int batch_size,
                                   std::optional<long> actual_hvp,
                                   std::optional<std::size_t> actual_bytes) {
  require(n >= 1 && d >= 1 && epochs >= 0 && steps_per_epoch >= 0 && batch_size >= 1,
          "complexity_report: counts must be positive");
  ComplexityReport report;
  report.predicted_hvp_applications =
      static_cast<long>(n) * epochs * steps_per_epoch;
  report.predicted_store_bytes =
      sizeof(double) * static_cast<std::size_t>(n) * static_cast<std::size_t>(d) +
      store_file_overhead(static_cast<std::size_t>(n), 0);
  report.actual_hvp_applications = actual_hvp;
  report.hvp_matches =
      actual_hvp.has_value() && *actual_hvp == report.predicted_hvp_applications;
  report.actual_store_bytes = actual_bytes;
  report.bytes_match =
      actual_bytes.has_value() && *actual_bytes == report.predicted_store_bytes;
  return report;
}

}  // namespace hfu
