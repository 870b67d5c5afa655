#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hfu/common.hpp"
#include "hfu/numkit.hpp"

namespace hfu {

struct Example {
  Vector features;
  int label = 0;
  std::size_t id = 0;
};

struct Dataset {
  std::vector<Example> examples;  // ordered by id, ids dense in 0..n-1
  Index n = 0;
  Index p = 0;
  int classes = 0;
  uint64_t digest = 0;

  std::vector<std::size_t> all_ids() const;
  // Subset with ids reassigned by position (keep order of `ids`).
  Dataset subset(std::span<const std::size_t> ids) const;
};

// Recomputes the content hash; call after any direct mutation.
uint64_t dataset_digest(const Dataset& ds);
Dataset finalize_dataset(std::vector<Example> examples, Index p, int classes);

// Isotropic unit-covariance Gaussian clusters with pairwise class-mean
// distance `separation`. Deterministic in seed.
Dataset make_synthetic(int classes, int per_class, int dim, double separation,
                       uint64_t seed);

struct CsvSchema {
  // Column selectors by header name or zero-based index.
  std::vector<std::variant<std::string, int>> feature_columns;
  std::variant<std::string, int> label_column = 0;
  bool has_header = false;
  int classes = 0;  // 0 = infer as max label + 1
};

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
void save_csv(const Dataset& ds, const std::filesystem::path& path);

// Big-endian IDX containers (0x803 images, 0x801 labels); pixels scaled
// to [0,1].
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

struct BatchSchedule {
  Index n = 0;
  int batch_size = 0;  // nominal |B|; the last batch of an epoch may be smaller
  int epochs = 0;
  double eta0 = 0.0;
  double decay = 1.0;
  uint64_t seed = 0;
  // batches[e][b] lists sample ids; every epoch partitions 0..n-1.
  std::vector<std::vector<std::vector<std::size_t>>> batches;

  int steps_per_epoch() const {
    return batches.empty() ? 0 : static_cast<int>(batches.front().size());
  }
  long total_steps() const {
    return static_cast<long>(epochs) * steps_per_epoch();
  }
  // eta0 * decay^(e*B + b), evaluated in closed form.
  double step_size(int epoch, int batch) const;
  double step_size_at(long step) const;
  uint64_t digest() const;
};

BatchSchedule build_schedule(Index n, int batch_size, int epochs, double eta0,
                             double decay, uint64_t seed);

// Retraining view: identical batches, step sizes and divisors; only the
// membership of removed ids in gradient sums changes.
struct RemovalView {
  const BatchSchedule* base = nullptr;
  std::vector<std::size_t> removed;  // sorted

  bool is_removed(std::size_t id) const;
};

RemovalView restrict(const BatchSchedule& schedule,
                     std::span<const std::size_t> removed);

}  // namespace hfu
