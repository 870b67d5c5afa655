#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hfu/baselines.hpp"
#include "hfu/harness.hpp"
#include "hfu/recollection.hpp"
#include "hfu/unlearn.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> parse_ids(const std::string& text) {
  std::vector<std::size_t> ids;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    ids.push_back(std::stoull(cell));
  }
  hfu::require(!ids.empty(), "no ids given");
  return ids;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    values.push_back(std::stod(cell));
  }
  return values;
}

struct RunInputs {
  hfu::ExperimentConfig cfg;
  hfu::Dataset dataset;
  hfu::ModelSpec spec;
  hfu::TrainConfig train;
  hfu::BatchSchedule schedule;
};

RunInputs load_run(const std::string& config_path, std::optional<uint64_t> seed) {
  RunInputs run;
  run.cfg = hfu::load_config(config_path);
  run.dataset = run.cfg.data.build_train();
  run.spec = run.cfg.model;
  if (run.spec.input_dim == 0) run.spec.input_dim = run.dataset.p;
  if (run.spec.classes == 0) run.spec.classes = run.dataset.classes;
  run.train = run.cfg.train;
  run.train.seed = seed.value_or(run.cfg.seeds.front());
  run.schedule =
      hfu::build_schedule(run.dataset.n, run.train.batch_size, run.train.epochs,
                          run.train.eta0, run.train.decay, run.train.seed);
  return run;
}

std::vector<std::size_t> forget_ids_from(const RunInputs& run,
                                         const std::string& forget,
                                         double rate) {
  if (!forget.empty()) return parse_ids(forget);
  hfu::require(rate > 0.0, "give --forget ids or a positive --rate");
  return hfu::sample_forget_set(run.dataset.n, rate, run.train.seed);
}

void write_results(const hfu::ExperimentConfig& cfg,
                   const hfu::ExperimentResult& result,
                   const std::string& out_dir) {
  const fs::path dir = out_dir.empty() ? fs::path(cfg.out_dir) : fs::path(out_dir);
  fs::create_directories(dir);
  const fs::path csv = dir / (result.name + ".csv");
  const fs::path manifest = dir / (result.name + "_manifest.json");
  hfu::write_csv(result, csv);
  hfu::write_manifest(cfg, result, manifest);
  std::cout << "wrote " << csv.string() << " (" << result.rows.size()
            << " rows) and " << manifest.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hessian-free certified unlearning toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic CSV dataset");
  int gd_classes = 2, gd_per_class = 250, gd_dim = 20;
  double gd_separation = 3.0;
  uint64_t gd_seed = 42;
  std::string gd_out = "data.csv";
  gen->add_option("--classes", gd_classes);
  gen->add_option("--per-class", gd_per_class);
  gen->add_option("--dim", gd_dim);
  gen->add_option("--separation", gd_separation);
  gen->add_option("--seed", gd_seed);
  gen->add_option("--out", gd_out)->required();

  // shared options for run-ish commands
  std::string config_path, out_params, out_store, out_dir, forget_list;
  std::optional<uint64_t> run_seed;
  double run_rate = 0.0;

  auto add_run_options = [&](CLI::App* cmd, bool with_forget) {
    cmd->add_option("--config", config_path, "experiment config (.json or key=value)")
        ->required();
    cmd->add_option("--seed", run_seed, "schedule/init seed (default: first config seed)");
    if (with_forget) {
      cmd->add_option("--forget", forget_list, "comma-separated sample ids");
      cmd->add_option("--rate", run_rate, "deletion rate when --forget is absent");
    }
  };

  auto* train_cmd = app.add_subcommand("train", "SGD learning run");
  add_run_options(train_cmd, false);
  std::string out_trajectory, in_trajectory;
  train_cmd->add_option("--out-params", out_params)->required();
  train_cmd->add_option("--out-trajectory", out_trajectory,
                        "record per-step checkpoints for offline recollection");

  auto* recollect_cmd =
      app.add_subcommand("recollect", "learning run with streaming recollection");
  add_run_options(recollect_cmd, false);
  recollect_cmd->add_option("--out-store", out_store)->required();
  recollect_cmd->add_option("--out-params", out_params);
  recollect_cmd->add_option("--trajectory", in_trajectory,
                            "replay a recorded trajectory instead of training");

  auto* retrain_cmd = app.add_subcommand("retrain", "retrain without forget ids");
  add_run_options(retrain_cmd, true);
  retrain_cmd->add_option("--out-params", out_params)->required();

  auto* unlearn_cmd =
      app.add_subcommand("unlearn", "certified deletion by vector addition");
  add_run_options(unlearn_cmd, true);
  std::string store_path, params_path, sens_mode = "bound", result_json;
  double sens_value = -1.0;
  unlearn_cmd->add_option("--store", store_path)->required();
  unlearn_cmd->add_option("--params", params_path)->required();
  unlearn_cmd->add_option("--sens-mode", sens_mode, "bound | value");
  unlearn_cmd->add_option("--sens-value", sens_value, "oracle-measured ||Delta||");
  unlearn_cmd->add_option("--out-params", out_params)->required();
  unlearn_cmd->add_option("--out-store", out_store);
  unlearn_cmd->add_option("--result-json", result_json);

  auto* baseline_cmd = app.add_subcommand("baseline", "NS/IJ/finetune/neggrad update");
  add_run_options(baseline_cmd, true);
  std::string baseline_method;
  baseline_cmd->add_option("--method", baseline_method, "ns | ij | finetune | neggrad")
      ->required();
  baseline_cmd->add_option("--params", params_path);
  baseline_cmd->add_option("--out-params", out_params)->required();

  auto* verify_cmd = app.add_subcommand("verify", "verification experiments");
  add_run_options(verify_cmd, false);
  verify_cmd->add_option("--out", out_dir);

  auto* apply_cmd = app.add_subcommand("apply", "application experiments");
  add_run_options(apply_cmd, false);
  apply_cmd->add_option("--out", out_dir);

  auto* ablate_cmd = app.add_subcommand("ablate", "single-axis ablation sweep");
  add_run_options(ablate_cmd, false);
  std::string axis_name = "step_size", axis_values = "";
  ablate_cmd->add_option("--axis", axis_name, "step_size | epochs | decay | clipping")
      ->required();
  ablate_cmd->add_option("--values", axis_values, "comma-separated axis values")
      ->required();
  ablate_cmd->add_option("--out", out_dir);

  auto* capacity_cmd =
      app.add_subcommand("capacity", "order-only deletion-capacity estimate");
  double cap_epsilon = 1.0, cap_delta = 1e-3, cap_rho = 0.99, cap_eta = 0.05;
  double cap_const = 1.0;
  long cap_d = 0, cap_n = 0;
  capacity_cmd->add_option("--epsilon", cap_epsilon);
  capacity_cmd->add_option("--delta", cap_delta);
  capacity_cmd->add_option("--d", cap_d)->required();
  capacity_cmd->add_option("--n", cap_n)->required();
  capacity_cmd->add_option("--rho", cap_rho)->required();
  capacity_cmd->add_option("--eta", cap_eta);
  capacity_cmd->add_option("--const", cap_const, "hidden constant (default 1)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const hfu::Dataset ds = hfu::make_synthetic(gd_classes, gd_per_class, gd_dim,
                                                  gd_separation, gd_seed);
      hfu::save_csv(ds, gd_out);
      std::cout << "wrote " << gd_out << " n=" << ds.n << " p=" << ds.p
                << " K=" << ds.classes << " digest=" << hfu::digest_hex(ds.digest)
                << "\n";
    } else if (train_cmd->parsed()) {
      RunInputs run = load_run(config_path, run_seed);
      if (!out_trajectory.empty()) run.train.record_trajectory = true;
      auto [params, traj] = hfu::train(run.spec, run.dataset, run.schedule,
                                       run.train, hfu::init_params(run.spec, run.train.seed));
      hfu::save_params(params, out_params);
      if (!out_trajectory.empty()) {
        hfu::save_trajectory(traj, run.spec, run.train, out_trajectory);
      }
      std::cout << "trained; params digest " << hfu::digest_hex(hfu::params_digest(params))
                << " -> " << out_params << "\n";
    } else if (recollect_cmd->parsed()) {
      RunInputs run = load_run(config_path, run_seed);
      hfu::RecollectionConfig rc;
      rc.parallel_width = run.cfg.parallel_width;
      if (!in_trajectory.empty()) {
        const hfu::TrajectoryFile file = hfu::load_trajectory(in_trajectory);
        hfu::OfflineRecollectResult rec = hfu::recollect_from_trajectory(
            file.spec, run.dataset, file.trajectory, file.config, rc);
        hfu::store_save(rec.store, out_store);
        if (!out_params.empty()) {
          hfu::save_params(file.trajectory.final_params, out_params);
        }
        std::cout << "recollected offline: " << rec.store.row_count() << " rows, "
                  << rec.stats.hvp_applications << " hvp applications -> "
                  << out_store << "\n";
      } else {
        hfu::RecollectResult rec = hfu::recollect_streaming(
            run.spec, run.dataset, run.schedule, run.train, rc);
        hfu::store_save(rec.store, out_store);
        if (!out_params.empty()) hfu::save_params(rec.params, out_params);
        std::cout << "recollected " << rec.store.row_count() << " rows, "
                  << rec.stats.hvp_applications << " hvp applications -> "
                  << out_store << "\n";
      }
    } else if (retrain_cmd->parsed()) {
      RunInputs run = load_run(config_path, run_seed);
      const auto forget = forget_ids_from(run, forget_list, run_rate);
      const hfu::RemovalView view = hfu::restrict(run.schedule, forget);
      auto [params, traj] =
          hfu::retrain(run.spec, run.dataset, view, run.train,
                       hfu::init_params(run.spec, run.train.seed));
      (void)traj;
      hfu::save_params(params, out_params);
      std::cout << "retrained without " << forget.size() << " ids -> "
                << out_params << "\n";
    } else if (unlearn_cmd->parsed()) {
      RunInputs run = load_run(config_path, run_seed);
      const auto forget = forget_ids_from(run, forget_list, run_rate);
      hfu::Params params = hfu::load_params(params_path);
      hfu::StoreMeta expected;
      expected.dataset_digest = run.dataset.digest;
      expected.schedule_digest = run.schedule.digest();
      expected.config_digest = run.train.digest();
      expected.final_params_digest = hfu::params_digest(params);
      bool digest_warning = false;
      hfu::ApproximatorStore store =
          hfu::store_load(store_path, &expected, &digest_warning);
      if (digest_warning) {
        std::cerr << "warning: store digests do not match this config/params "
                     "combination; proceeding with the store as loaded\n";
      }
      hfu::SensitivityEstimate sens;
      if (sens_mode == "value") {
        hfu::require(sens_value >= 0.0, "--sens-value must be given and >= 0");
        sens.mode = hfu::SensitivityEstimate::Mode::oracle;
        sens.value = sens_value;
      } else if (sens_mode == "bound") {
        auto [learned, traj] =
            hfu::train(run.spec, run.dataset, run.schedule, run.train,
                       hfu::init_params(run.spec, run.train.seed));
        (void)learned;
        const hfu::RegularityConstants consts = hfu::estimate_constants(
            traj.final_params, run.dataset, run.schedule, traj.observed_max_grad,
            run.train.clip_threshold);
        sens = hfu::sensitivity_bound(
            consts, run.train.eta0, run.train.decay, run.schedule.total_steps(),
            run.schedule.steps_per_epoch(), run.train.batch_size,
            static_cast<int>(forget.size()));
      } else {
        throw hfu::ConfigError("--sens-mode must be bound or value");
      }
      hfu::Rng rng = hfu::Rng(run.train.seed).long_jumped(2);
      hfu::UnlearnRequest request{forget, 0};
      const hfu::UnlearnResult result =
          hfu::unlearn(params, store, request, run.cfg.budget, sens, rng);
      hfu::save_params(result.noisy, out_params);
      if (!out_store.empty()) hfu::store_save(store, out_store);
      if (!result_json.empty()) {
        nlohmann::json j;
        j["sigma"] = result.sigma;
        j["sensitivity"] = sens.value;
        j["sensitivity_mode"] =
            sens.mode == hfu::SensitivityEstimate::Mode::bound ? "bound" : "oracle";
        j["noise_seed"] = result.noise_seed;
        j["consumed"] = result.consumed;
        j["epsilon"] = run.cfg.budget.epsilon;
        j["delta"] = run.cfg.budget.delta;
        j["outside_classical_regime"] = result.outside_classical_regime;
        j["composition_accounting"] = "none (per-request budget only)";
        j["addition_time_ns"] = result.addition_time.count();
        std::ofstream out(result_json);
        out << j.dump(2) << "\n";
      }
      std::cout << "unlearned " << forget.size() << " ids, sigma=" << result.sigma
                << " -> " << out_params << "\n";
    } else if (baseline_cmd->parsed()) {
      RunInputs run = load_run(config_path, run_seed);
      const auto forget = forget_ids_from(run, forget_list, run_rate);
      hfu::Params start = params_path.empty()
                              ? hfu::train(run.spec, run.dataset, run.schedule,
                                           run.train,
                                           hfu::init_params(run.spec, run.train.seed))
                                    .first
                              : hfu::load_params(params_path);
      hfu::Params updated = start;
      if (baseline_method == "ns") {
        updated = hfu::newton_step(start, run.dataset, forget, run.cfg.damping);
      } else if (baseline_method == "ij") {
        updated = hfu::infinitesimal_jackknife(start, run.dataset, forget,
                                               run.cfg.damping);
      } else if (baseline_method == "finetune") {
        std::vector<std::size_t> remaining;
        for (std::size_t id = 0; id < static_cast<std::size_t>(run.dataset.n); ++id) {
          if (!std::binary_search(forget.begin(), forget.end(), id)) {
            remaining.push_back(id);
          }
        }
        hfu::TrainConfig mc = run.cfg.finetune_cfg;
        mc.seed = run.train.seed;
        updated = hfu::finetune(start, run.dataset.subset(remaining), mc);
      } else if (baseline_method == "neggrad") {
        hfu::TrainConfig mc = run.cfg.neggrad_cfg;
        mc.seed = run.train.seed;
        updated = hfu::neggrad(start, run.dataset.subset(forget), mc);
      } else {
        throw hfu::ConfigError("unknown baseline method '" + baseline_method + "'");
      }
      hfu::save_params(updated, out_params);
      std::cout << baseline_method << " update -> " << out_params << "\n";
    } else if (verify_cmd->parsed()) {
      const hfu::ExperimentConfig cfg = hfu::load_config(config_path);
      write_results(cfg, hfu::run_verification(cfg), out_dir);
    } else if (apply_cmd->parsed()) {
      const hfu::ExperimentConfig cfg = hfu::load_config(config_path);
      write_results(cfg, hfu::run_application(cfg), out_dir);
    } else if (ablate_cmd->parsed()) {
      const hfu::ExperimentConfig cfg = hfu::load_config(config_path);
      const auto values = parse_doubles(axis_values);
      write_results(cfg,
                    hfu::run_ablation(cfg, hfu::ablation_axis_from_string(axis_name),
                                      values),
                    out_dir);
    } else if (capacity_cmd->parsed()) {
      hfu::PrivacyBudget budget;
      budget.epsilon = cap_epsilon;
      budget.delta = cap_delta;
      budget.allow_epsilon_above_one = true;
      const double m = hfu::deletion_capacity(budget, cap_d, cap_rho, cap_n,
                                              cap_eta, cap_const);
      std::cout << "deletion capacity (order-only estimate, hidden constant "
                << cap_const << "): " << m << " samples\n";
    }
  } catch (const hfu::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const hfu::DivergenceError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return 3;
  } catch (const hfu::DigestError& e) {
    std::cerr << "digest mismatch: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
