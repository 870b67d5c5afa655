#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hfu/harness.hpp"
#include "hfu/unlearn.hpp"
#include "oracles.hpp"

using namespace hfu;

namespace {

struct Pipeline {
  Dataset ds;
  ModelSpec spec;
  TrainConfig cfg;
  BatchSchedule schedule;
  RecollectResult rec;
};

Pipeline make_pipeline(uint64_t seed, int per_class = 10, int epochs = 3) {
  Pipeline p{make_synthetic(2, per_class, 5, 2.5, 33), ModelSpec{}, TrainConfig{},
             BatchSchedule{}, RecollectResult{}};
  p.spec = ModelSpec{ModelKind::logistic, p.ds.p, p.ds.classes, 0, 0.5};
  p.cfg.eta0 = 0.05;
  p.cfg.decay = 0.995;
  p.cfg.epochs = epochs;
  p.cfg.batch_size = 5;
  p.cfg.seed = seed;
  p.schedule = build_schedule(p.ds.n, p.cfg.batch_size, p.cfg.epochs, p.cfg.eta0,
                              p.cfg.decay, p.cfg.seed);
  RecollectionConfig rc;
  p.rec = recollect_streaming(p.spec, p.ds, p.schedule, p.cfg, rc);
  return p;
}

ApproximatorStore zero_store(const Params& params, std::vector<std::size_t> ids) {
  StoreMeta meta;
  meta.final_params_digest = params_digest(params);
  return ApproximatorStore(std::move(ids), params.theta.size(), meta);
}

}  // namespace

TEST_CASE("sigma calibration round trip") {
  PrivacyBudget budget{1.0, 1e-3, false};
  const double sigma = noise_sigma(0.1, budget);
  // algebraic inverse recovers the sensitivity
  CHECK(sigma * budget.epsilon / std::sqrt(2.0 * std::log(1.25 / budget.delta)) ==
        doctest::Approx(0.1).epsilon(1e-12));
  // formula value, computed independently
  CHECK(sigma == doctest::Approx(0.1 * std::sqrt(2.0 * std::log(1250.0)))
                     .epsilon(1e-15));
}

TEST_CASE("null statistic with zero noise returns the model unchanged") {
  const ModelSpec spec{ModelKind::logistic, 4, 2, 0, 0.0};
  const Params w = init_params(spec, 9);
  ApproximatorStore store = zero_store(w, {3});
  SensitivityEstimate sens;  // oracle mode, value 0
  PrivacyBudget budget{1.0, 1e-3, false};
  Rng rng(1);
  const UnlearnResult result = unlearn(w, store, UnlearnRequest{{3}, 0}, budget,
                                       sens, rng);
  CHECK(result.clean.theta == w.theta);
  CHECK(result.noisy.theta == w.theta);
  CHECK(result.sigma == 0.0);
  CHECK(store.is_consumed(3));
}

TEST_CASE("clean unlearn adds the row sum and is deterministic") {
  Pipeline p = make_pipeline(2);
  const std::vector<std::size_t> forget{1, 4, 7};
  const Vector expected = p.rec.params.theta + p.rec.store.sum_rows(forget);

  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;
  sens.value = 0.05;
  ApproximatorStore store_a = p.rec.store;
  ApproximatorStore store_b = p.rec.store;
  Rng rng_a(7), rng_b(7);
  const UnlearnResult a =
      unlearn(p.rec.params, store_a, UnlearnRequest{forget, 0}, budget, sens, rng_a);
  const UnlearnResult b =
      unlearn(p.rec.params, store_b, UnlearnRequest{forget, 0}, budget, sens, rng_b);
  CHECK(a.clean.theta == expected);
  CHECK(a.clean.theta == b.clean.theta);
  CHECK(a.noisy.theta == b.noisy.theta);
  CHECK(a.sigma > 0.0);
  CHECK(a.addition_time.count() >= 0);

  // noise replay from the recorded seed (same-order arithmetic)
  Rng replay(a.noise_seed);
  const Vector noise = gaussian_vector(replay, a.sigma, a.clean.theta.size());
  const Vector rebuilt = a.clean.theta + noise;
  CHECK((rebuilt - a.noisy.theta).norm() == 0.0);
}

TEST_CASE("consumed ids cannot be reused") {
  Pipeline p = make_pipeline(3);
  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;
  Rng rng(5);
  ApproximatorStore store = p.rec.store;
  const UnlearnResult first =
      unlearn(p.rec.params, store, UnlearnRequest{{2}, 0}, budget, sens, rng);
  CHECK_THROWS_WITH_AS(
      unlearn(first.clean, store, UnlearnRequest{{2}, 1}, budget, sens, rng),
      doctest::Contains("consumed"), ConfigError);
}

TEST_CASE("digest pairing is enforced before any addition") {
  Pipeline p = make_pipeline(4);
  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;
  Rng rng(5);
  ApproximatorStore store = p.rec.store;
  Params wrong = p.rec.params;
  wrong.theta[0] += 1.0;
  CHECK_THROWS_AS(unlearn(wrong, store, UnlearnRequest{{2}, 0}, budget, sens, rng),
                  DigestError);
}

TEST_CASE("epsilon above one needs the explicit flag") {
  PrivacyBudget strict{2.0, 1e-3, false};
  CHECK_THROWS_WITH_AS(strict.validate(), doctest::Contains("classical"),
                       ConfigError);

  Pipeline p = make_pipeline(5);
  PrivacyBudget permissive{2.0, 1e-3, true};
  SensitivityEstimate sens;
  sens.value = 0.01;
  Rng rng(2);
  ApproximatorStore store = p.rec.store;
  const UnlearnResult result =
      unlearn(p.rec.params, store, UnlearnRequest{{0}, 0}, permissive, sens, rng);
  CHECK(result.outside_classical_regime);
}

TEST_CASE("sequential equals batch deletion") {
  Pipeline p = make_pipeline(6);
  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;
  Rng rng(11);

  ApproximatorStore seq_store = p.rec.store;
  const std::vector<UnlearnRequest> requests{
      {{1, 3}, 0}, {{8}, 1}, {{11, 5, 17}, 2}};
  const auto results = unlearn_sequential(p.rec.params, seq_store, requests,
                                          budget, sens, rng);
  REQUIRE(results.size() == 3);

  ApproximatorStore batch_store = p.rec.store;
  Rng rng2(11);
  const UnlearnResult batch =
      unlearn(p.rec.params, batch_store, UnlearnRequest{{1, 3, 8, 11, 5, 17}, 0},
              budget, sens, rng2);
  CHECK((results.back().clean.theta - batch.clean.theta).lpNorm<Eigen::Infinity>() <=
        1e-12);

  // empty request list
  ApproximatorStore empty_store = p.rec.store;
  const std::vector<UnlearnRequest> none;
  CHECK(unlearn_sequential(p.rec.params, empty_store, none, budget, sens, rng).empty());

  // overlapping requests are rejected up front
  ApproximatorStore overlap_store = p.rec.store;
  const std::vector<UnlearnRequest> overlap{{{1}, 0}, {{1, 2}, 1}};
  CHECK_THROWS_WITH_AS(unlearn_sequential(p.rec.params, overlap_store, overlap,
                                          budget, sens, rng),
                       doctest::Contains("more than one request"), ConfigError);
}

TEST_CASE("sensitivity oracle") {
  const ModelSpec spec{ModelKind::ridge, 3, 2, 0, 0.0};
  Rng rng(8);
  const Params w = oracles::random_params(spec, rng);
  Params w_ret = w;
  Vector a = oracles::random_vector(spec.parameter_count(), rng, 0.1);
  w_ret.theta += a;
  CHECK(sensitivity_oracle(w_ret, w, a).value == doctest::Approx(0.0));
  CHECK(sensitivity_oracle(w_ret, w, Vector::Zero(a.size())).value ==
        doctest::Approx(a.norm()));
  CHECK(sensitivity_oracle(w_ret, w, a).mode == SensitivityEstimate::Mode::oracle);
  CHECK_THROWS_AS(sensitivity_oracle(w_ret, w, Vector::Zero(2)), ConfigError);
}

TEST_CASE("sensitivity bound closed form") {
  RegularityConstants consts;
  consts.grad_bound = 1.0;
  consts.rho = 0.99;
  const SensitivityEstimate est = sensitivity_bound(consts, 0.01, 0.9, 50, 5, 10, 1);
  // term-by-term independent evaluation
  const double expected =
      2.0 * 0.01 * 1.0 * (std::pow(0.99, 50.0) - std::pow(0.9, 100.0)) *
      (0.01 * 0.9 / ((0.99 - 0.9) * (0.99 - 0.81)) + 1.0 / (10.0 * (0.99 - 0.9)));
  CHECK(est.value == doctest::Approx(expected).epsilon(1e-14));
  CHECK(est.value == doctest::Approx(0.020165983525).epsilon(1e-9));
  CHECK(est.mode == SensitivityEstimate::Mode::bound);
  REQUIRE(est.inputs.has_value());
  CHECK(est.inputs->m == 1);

  // linear in m
  const SensitivityEstimate doubled =
      sensitivity_bound(consts, 0.01, 0.9, 50, 5, 10, 2);
  CHECK(doubled.value == doctest::Approx(2.0 * est.value).epsilon(1e-15));

  // rho <= q violates the precondition
  RegularityConstants bad = consts;
  bad.rho = 0.85;
  CHECK_THROWS_WITH_AS(sensitivity_bound(bad, 0.01, 0.9, 50, 5, 10, 1),
                       doctest::Contains("q < rho"), ConfigError);
  RegularityConstants one = consts;
  one.rho = 1.0;
  CHECK_THROWS_AS(sensitivity_bound(one, 0.01, 0.9, 50, 5, 10, 1), ConfigError);
}

TEST_CASE("deletion capacity functional form") {
  PrivacyBudget unit{1.0, std::exp(-1.0), true};
  CHECK(deletion_capacity(unit, 1, 1.0, 1, 1.0) == doctest::Approx(1.0));

  PrivacyBudget budget{1.0, 1e-3, false};
  const double base = deletion_capacity(budget, 100, 0.99, 10, 0.05);
  const double halved = deletion_capacity(budget, 100, 0.495, 10, 0.05);
  CHECK(halved / base == doctest::Approx(1024.0).epsilon(1e-9));

  // independent arithmetic for the reference point
  const double expected =
      1.0 / (0.05 * std::sqrt(std::log(1000.0)) * 10.0 * std::pow(0.99, 500.0));
  CHECK(deletion_capacity(budget, 100, 0.99, 500, 0.05) ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(115.8).epsilon(1e-3));

  // hidden constant scales linearly
  CHECK(deletion_capacity(budget, 100, 0.99, 500, 0.05, 3.0) ==
        doctest::Approx(3.0 * expected).epsilon(1e-12));

  CHECK_THROWS_AS(deletion_capacity(budget, 100, 1.5, 10, 0.05), ConfigError);
}

TEST_CASE("noise matches the calibrated distribution in aggregate") {
  const ModelSpec spec{ModelKind::logistic, 999, 2, 0, 0.0};  // d = 2000
  const Params w = make_params(spec, Vector::Zero(spec.parameter_count()));
  ApproximatorStore store = zero_store(w, {0});
  SensitivityEstimate sens;
  sens.value = 0.1;
  PrivacyBudget budget{1.0, 1e-3, false};
  Rng rng(21);
  const UnlearnResult result =
      unlearn(w, store, UnlearnRequest{{0}, 0}, budget, sens, rng);
  const Vector noise = result.noisy.theta - result.clean.theta;
  const double mean = noise.mean();
  const double stddev = std::sqrt((noise.array() - mean).square().sum() /
                                  static_cast<double>(noise.size() - 1));
  CHECK(stddev == doctest::Approx(result.sigma).epsilon(0.05));
}

TEST_CASE("repair with zero epochs is the identity") {
  Pipeline p = make_pipeline(12);
  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;
  Rng rng(3);
  ApproximatorStore store = p.rec.store;
  const std::vector<std::size_t> forget{0, 5};
  const UnlearnResult result =
      unlearn(p.rec.params, store, UnlearnRequest{forget, 0}, budget, sens, rng);

  std::vector<std::size_t> remaining;
  for (std::size_t id = 0; id < static_cast<std::size_t>(p.ds.n); ++id) {
    if (id != 0 && id != 5) remaining.push_back(id);
  }
  const Dataset rest = p.ds.subset(remaining);
  TrainConfig repair_cfg = p.cfg;
  repair_cfg.epochs = 0;
  RecollectionConfig rc;
  const RepairResult repaired =
      repair(p.spec, rest, result.clean, store, repair_cfg, rc);
  CHECK(repaired.params.theta == result.clean.theta);
  CHECK(repaired.store.row_count() == store.row_count());
}

TEST_CASE("repair restores accuracy degraded by heavy deletion noise") {
  const Dataset ds = make_synthetic(2, 60, 6, 3.0, 44);
  const ModelSpec spec{ModelKind::logistic, ds.p, ds.classes, 0, 0.05};
  TrainConfig cfg;
  cfg.eta0 = 0.1;
  cfg.decay = 0.995;
  cfg.epochs = 6;
  cfg.batch_size = 12;
  cfg.seed = 17;
  const BatchSchedule schedule =
      build_schedule(ds.n, cfg.batch_size, cfg.epochs, cfg.eta0, cfg.decay, cfg.seed);
  RecollectionConfig rc;
  RecollectResult rec = recollect_streaming(spec, ds, schedule, cfg, rc);

  std::vector<std::size_t> forget;
  for (std::size_t id = 60; id < 110; ++id) forget.push_back(id);  // 50 of class 1
  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;
  sens.value = 0.2;  // sigma ~ 0.76: the noisy model degrades for sure
  Rng rng(9);
  ApproximatorStore store = rec.store;
  const UnlearnResult result =
      unlearn(rec.params, store, UnlearnRequest{forget, 0}, budget, sens, rng);

  std::vector<std::size_t> remaining;
  for (std::size_t id = 0; id < static_cast<std::size_t>(ds.n); ++id) {
    if (id < 60 || id >= 110) remaining.push_back(id);
  }
  const Dataset rest = ds.subset(remaining);
  const Dataset test = make_synthetic(2, 100, 6, 3.0, 45);

  const auto accuracy = [&](const Params& params) {
    const std::vector<int> preds = predict(params, test);
    long correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == test.examples[i].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.n);
  };

  TrainConfig repair_cfg = cfg;
  repair_cfg.epochs = 4;
  repair_cfg.seed = 18;
  const RepairResult repaired =
      repair(spec, rest, result.noisy, store, repair_cfg, rc);

  // the remaining-data reference model marks the recoverable level
  const BatchSchedule ref_schedule =
      build_schedule(rest.n, repair_cfg.batch_size, repair_cfg.epochs,
                     repair_cfg.eta0, repair_cfg.decay, repair_cfg.seed);
  auto [reference, ref_traj] =
      train(spec, rest, ref_schedule, repair_cfg, init_params(spec, 18));
  (void)ref_traj;

  CHECK(accuracy(repaired.params) > accuracy(result.noisy));
  CHECK(accuracy(repaired.params) >= accuracy(reference) - 0.05);
  CHECK(repaired.store.row_count() == remaining.size());
}

TEST_CASE("repaired store tracks the pipeline counterfactual (quadratic)") {
  // ridge end to end: learn, unlearn U, repair, then delete one more sample
  const Dataset ds = make_synthetic(2, 12, 4, 2.5, 52);  // n=24
  const ModelSpec spec{ModelKind::ridge, ds.p, ds.classes, 0, 0.3};
  TrainConfig cfg;
  cfg.eta0 = 0.05;
  cfg.decay = 0.995;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.seed = 71;
  const BatchSchedule schedule =
      build_schedule(ds.n, cfg.batch_size, cfg.epochs, cfg.eta0, cfg.decay, cfg.seed);
  RecollectionConfig rc;
  RecollectResult rec = recollect_streaming(spec, ds, schedule, cfg, rc);

  const std::vector<std::size_t> forget{1, 5, 9};
  PrivacyBudget budget{1.0, 1e-3, false};
  SensitivityEstimate sens;  // sigma 0: keeps the counterfactual shared
  Rng rng(4);
  ApproximatorStore store = rec.store;
  const UnlearnResult clean =
      unlearn(rec.params, store, UnlearnRequest{forget, 0}, budget, sens, rng);

  std::vector<std::size_t> remaining;
  for (std::size_t id = 0; id < static_cast<std::size_t>(ds.n); ++id) {
    if (std::find(forget.begin(), forget.end(), id) == forget.end()) {
      remaining.push_back(id);
    }
  }
  const Dataset rest = ds.subset(remaining);
  TrainConfig repair_cfg = cfg;
  repair_cfg.epochs = 3;
  repair_cfg.seed = 72;
  const RepairResult repaired =
      repair(spec, rest, clean.clean, store, repair_cfg, rc);

  // delete one more remaining sample via the repaired store
  const std::size_t new_id = 6;  // position in `rest`
  const Vector w_after =
      repaired.params.theta + repaired.store.row(new_id);

  // pipeline counterfactual: drop the sample from both phases
  const std::size_t old_id = remaining[new_id];
  auto [learn_cf, traj_cf] =
      retrain(spec, ds, restrict(schedule, std::vector<std::size_t>{old_id}), cfg,
              init_params(spec, cfg.seed), &rec.trajectory.provenance);
  const Vector unlearn_cf = learn_cf.theta + rec.store.sum_rows(forget);
  const BatchSchedule repair_schedule =
      build_schedule(rest.n, repair_cfg.batch_size, repair_cfg.epochs,
                     repair_cfg.eta0, repair_cfg.decay, repair_cfg.seed);
  auto [repair_cf, traj_cf2] = retrain(
      spec, rest, restrict(repair_schedule, std::vector<std::size_t>{new_id}),
      repair_cfg, make_params(spec, unlearn_cf));

  const double err = (repair_cf.theta - w_after).norm();
  const double gap = (repair_cf.theta - repaired.params.theta).norm();
  // calibrated against the quadratic oracle during implementation
  CHECK(err <= 0.05 * (1.0 + gap));
}
