#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hfu/baselines.hpp"
#include "hfu/common.hpp"
#include "hfu/data.hpp"
#include "hfu/model.hpp"
#include "hfu/recollection.hpp"
#include "hfu/trainer.hpp"
#include "hfu/unlearn.hpp"

namespace hfu {

struct DatasetConfig {
  enum class Kind { synthetic, csv, idx };
  Kind kind = Kind::synthetic;

  // synthetic
  int classes = 2;
  int per_class = 250;
  int dim = 20;
  double separation = 3.0;
  uint64_t data_seed = 42;
  int test_per_class = 100;

  // csv / idx
  std::string csv_path;
  std::string csv_test_path;
  std::string csv_label = "label";
  bool csv_header = true;
  int csv_classes = 0;
  std::string idx_images, idx_labels, idx_test_images, idx_test_labels;

  Dataset build_train() const;
  Dataset build_test() const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig data;
  ModelSpec model;  // input_dim is filled from the dataset when 0
  TrainConfig train;
  std::vector<uint64_t> seeds{42};
  std::vector<double> rates{0.3};
  std::vector<std::string> methods{"hf", "retrain"};
  PrivacyBudget budget;
  enum class SensitivityMode { oracle, bound };
  SensitivityMode sensitivity = SensitivityMode::oracle;
  double damping = 0.01;
  TrainConfig finetune_cfg;
  TrainConfig neggrad_cfg;
  int parallel_width = 1;
  std::string out_dir = ".";

  uint64_t digest() const;
};

// Flat key-value config; .json reads a flat JSON object, anything else
// reads `key = value` lines. Key list is documented in the README.
ExperimentConfig load_config(const std::filesystem::path& path);

struct ResultRow {
  std::string axis;  // ablation only
  std::optional<double> axis_value;
  std::string status = "ok";  // ok | divergent | error
  std::string method;
  uint64_t seed = 0;
  double deletion_rate = 0.0;
  std::optional<double> distance, distance_min, distance_max;
  std::optional<double> pearson_r, spearman_r;
  std::optional<double> pearson_trial, spearman_trial;
  std::optional<double> acc_test, err_test, err_remaining, err_forget;
  std::optional<double> t_precompute_s, t_store_io_s, t_unlearn_s, t_retrain_s;
  std::optional<double> speedup;
  std::optional<std::uint64_t> store_bytes;
  std::optional<double> sigma;
};

struct ExperimentResult {
  std::string name;
  uint64_t config_digest = 0;
  bool ablation = false;
  std::vector<ResultRow> rows;
  // ||grad F_S(w)|| at the learned params per seed; lets degraded NS/IJ
  // fidelity be attributed to non-stationarity of w. Manifest-only.
  std::vector<std::pair<uint64_t, double>> final_grad_norms;
};

double metric_distance(const Params& w_retrain, const Params& w_method);

struct CorrelationPair {
  std::optional<double> pearson_r;
  std::optional<double> spearman_r;
};

// Per-sample mode: pairs approx vs actual loss changes over the forgotten
// samples. delta is the method's parameter update (a-sum for HF).
CorrelationPair metric_loss_change_correlation(const Params& learned,
                                               const Params& retrained,
                                               const Vector& delta,
                                               const Dataset& ds,
                                               std::span<const std::size_t> forget);

// Per-trial mode: one aggregate forget-set loss change per trial.
struct TrialLossChange {
  double approx = 0.0;
  double actual = 0.0;
};
TrialLossChange trial_loss_change(const Params& learned, const Params& retrained,
                                  const Vector& delta, const Dataset& ds,
                                  std::span<const std::size_t> forget);
CorrelationPair correlate_trials(std::span<const TrialLossChange> trials);

struct AccuracySuite {
  double acc_test = 0.0;
  double err_test = 0.0;
  double err_remaining = 0.0;
  double err_forget = 0.0;
};

AccuracySuite accuracy_suite(const Params& params, const Dataset& test,
                             const Dataset& train,
                             std::span<const std::size_t> remaining,
                             std::span<const std::size_t> forget);

// Deterministic forget-set draw; depends only on (seed, rate, n).
std::vector<std::size_t> sample_forget_set(Index n, double rate, uint64_t seed);

ExperimentResult run_verification(const ExperimentConfig& cfg);
ExperimentResult run_application(const ExperimentConfig& cfg);

enum class AblationAxis { step_size, epochs, decay, clipping };
AblationAxis ablation_axis_from_string(const std::string& name);
ExperimentResult run_ablation(const ExperimentConfig& cfg, AblationAxis axis,
                              std::span<const double> values);

// Fixed column order; unmeasured fields stay empty. Byte-deterministic
// given fixed seeds and single-threaded execution.
void write_csv(const ExperimentResult& result, const std::filesystem::path& path);
void write_manifest(const ExperimentConfig& cfg, const ExperimentResult& result,
                    const std::filesystem::path& path);

}  // namespace hfu
