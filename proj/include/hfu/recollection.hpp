#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "hfu/common.hpp"
#include "hfu/data.hpp"
#include "hfu/model.hpp"
#include "hfu/trainer.hpp"

namespace hfu {

struct StoreMeta {
  enum class Mode : uint8_t { streaming = 0, from_trajectory = 1 };

  uint64_t dataset_digest = 0;
  uint64_t schedule_digest = 0;
  uint64_t config_digest = 0;
  uint64_t final_params_digest = 0;
  Mode mode = Mode::streaming;
};

// Per-sample recollection vectors keyed by tracked id; rows consumed by
// unlearning are tombstoned in place, never compacted.
class ApproximatorStore {
 public:
  ApproximatorStore() = default;
  ApproximatorStore(std::vector<std::size_t> tracked_sorted, Index dim,
                    StoreMeta meta);

  Index dim() const { return rows_.cols(); }
  std::size_t row_count() const { return tracked_.size(); }
  const std::vector<std::size_t>& tracked() const { return tracked_; }

  bool has(std::size_t id) const;
  Index row_index(std::size_t id) const;
  Eigen::Ref<const RowMatrix> rows() const { return rows_; }
  RowMatrix& mutable_rows() { return rows_; }
  Vector row(std::size_t id) const;

  // Sum of rows in ascending id order.
  Vector sum_rows(std::span<const std::size_t> ids) const;

  bool is_consumed(std::size_t id) const;
  void mark_consumed(std::span<const std::size_t> ids);
  std::vector<std::size_t> consumed_ids() const;

  const StoreMeta& meta() const { return meta_; }
  StoreMeta& meta() { return meta_; }

  // Digest of the params the next unlearn request must apply to; starts at
  // the learned params and advances along the clean unlearning chain.
  uint64_t current_params_digest = 0;

 private:
  std::vector<std::size_t> tracked_;
  std::vector<uint8_t> consumed_;
  RowMatrix rows_;
  StoreMeta meta_;
};

struct RecollectionConfig {
  std::vector<std::size_t> tracked;  // empty = every dataset id
  enum class InjectionHessian { full_batch, leave_one_out };
  // leave_one_out is a diagnostic for quadratic-case exactness and only
  // accepts a single tracked id; it breaks shared-multiplier additivity.
  InjectionHessian injection = InjectionHessian::full_batch;
  int parallel_width = 1;
};

struct RecollectStats {
  long hvp_applications = 0;
  long injections = 0;
  double max_row_norm = 0.0;
};

struct RecollectResult {
  Params params;
  ApproximatorStore store;
  Trajectory trajectory;
  RecollectStats stats;
};

constexpr double kDivergenceGuard = 1e6;

// Trains while streaming the per-step recursion: every tracked row is
// multiplied by (I - eta*H) first, then rows of batch members receive
// (eta/|B|) times the clipped gradient the update consumed.
RecollectResult recollect_streaming(const ModelSpec& spec, const Dataset& ds,
                                    const BatchSchedule& schedule,
                                    const TrainConfig& config,
                                    const RecollectionConfig& rc);

struct OfflineRecollectResult {
  ApproximatorStore store;
  RecollectStats stats;
};

// Replays the same recursion against recorded per-step checkpoints;
// bit-identical to the streaming store.
OfflineRecollectResult recollect_from_trajectory(const ModelSpec& spec,
                                                 const Dataset& ds,
                                                 const Trajectory& trajectory,
                                                 const TrainConfig& config,
                                                 const RecollectionConfig& rc);

// Continues the recursion over a fresh run (the repair pathway): rows are
// seeded with existing approximators and carried through the multipliers.
RecollectResult recollect_continue(const ModelSpec& spec, const Dataset& ds,
                                   const BatchSchedule& schedule,
                                   const TrainConfig& config,
                                   const RecollectionConfig& rc,
                                   const Params& start,
                                   const RowMatrix& initial_rows);

// "HFUN" container: magic, version u32, n u64, d u64, tracked ids, rows as
// little-endian doubles, digest footer, then the tombstone section.
void store_save(const ApproximatorStore& store, const std::filesystem::path& path);
ApproximatorStore store_load(const std::filesystem::path& path,
                             const StoreMeta* expected = nullptr,
                             bool* digest_warning = nullptr);

// Bytes beyond the 8*n*d payload for a store of n tracked rows.
std::size_t store_file_overhead(std::size_t n_tracked, std::size_t n_consumed);

struct ComplexityReport {
  long predicted_hvp_applications = 0;  // n * E * B
  std::optional<long> actual_hvp_applications;
  bool hvp_matches = false;
  std::size_t predicted_store_bytes = 0;  // 8*n*d + overhead
  std::optional<std::size_t> actual_store_bytes;
  bool bytes_match = false;
};

ComplexityReport complexity_report(Index n, Index d, int epochs,
                                   int steps_per_epoch, int batch_size,
                                   std::optional<long> actual_hvp = {},
                                   std::optional<std::size_t> actual_bytes = {});

}  // namespace hfu
