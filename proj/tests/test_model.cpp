#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "hfu/model.hpp"
#include "hfu/trainer.hpp"
#include "oracles.hpp"

using namespace hfu;

namespace {

ModelSpec spec_of(ModelKind kind, Index p, int k, Index h = 0, double l2 = 0.0) {
  return ModelSpec{kind, p, k, h, l2};
}

const Dataset& small_data() {
  static const Dataset ds = make_synthetic(3, 12, 6, 2.5, 21);
  return ds;
}

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(spec_of(ModelKind::logistic, 784, 10).parameter_count() == 7850);
  CHECK(spec_of(ModelKind::ridge, 5, 2).parameter_count() == 12);
  CHECK(spec_of(ModelKind::mlp2, 20, 3, 16).parameter_count() ==
        16 * 21 + 3 * 17);
}

TEST_CASE("loss at the origin") {
  const Dataset& ds = small_data();
  const auto ids = ds.all_ids();

  const ModelSpec logistic = spec_of(ModelKind::logistic, ds.p, ds.classes);
  const Params zero_logistic = make_params(logistic, Vector::Zero(logistic.parameter_count()));
  CHECK(loss(zero_logistic, ds, ids) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  // with the L2 term the regularizer vanishes at the origin
  const ModelSpec reg = spec_of(ModelKind::logistic, ds.p, ds.classes, 0, 0.5);
  const Params zero_reg = make_params(reg, Vector::Zero(reg.parameter_count()));
  CHECK(loss(zero_reg, ds, ids) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  // ridge with zero scores and synthetic one-hot targets: 0.5 per sample
  const ModelSpec ridge = spec_of(ModelKind::ridge, ds.p, ds.classes);
  const Params zero_ridge = make_params(ridge, Vector::Zero(ridge.parameter_count()));
  CHECK(loss(zero_ridge, ds, ids) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("gradient matches finite differences") {
  const Dataset& ds = small_data();
  Rng rng(31);
  for (ModelKind kind : {ModelKind::ridge, ModelKind::logistic, ModelKind::mlp2}) {
    const ModelSpec spec = spec_of(kind, ds.p, ds.classes, 4, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
      const Params params = oracles::random_params(spec, rng);
      const auto batch = oracles::random_batch(ds.n, 5, rng);
      const Vector g = grad(params, ds, batch);
      const Vector fd = oracles::fd_grad(params, ds, batch, 1e-6);
      CHECK((g - fd).norm() / fd.norm() < 1e-6);
    }
  }
}

TEST_CASE("regularizer-only gradient isolates l2 term") {
  const Dataset& ds = small_data();
  // zero-feature example: the data gradient of ridge vanishes except the
  // label coordinate of the bias column
  Dataset zero_ds = ds;
  for (Example& ex : zero_ds.examples) ex.features.setZero();
  const ModelSpec spec = spec_of(ModelKind::ridge, ds.p, ds.classes, 0, 0.7);
  Rng rng(5);
  const Params params = oracles::random_params(spec, rng);
  const std::vector<std::size_t> one{0};
  const Vector g = grad(params, zero_ds, one);
  const Vector fd = oracles::fd_grad(params, zero_ds, one, 1e-6);
  CHECK((g - fd).norm() < 1e-7 * std::max(1.0, fd.norm()));
  // l2 contribution present in every weight coordinate
  const Vector data_only = g - 0.7 * params.theta;
  // weight block rows touch only bias columns for zero features
  for (Index k = 0; k < spec.classes; ++k) {
    for (Index j = 0; j < spec.input_dim; ++j) {
      CHECK(data_only[k * (spec.input_dim + 1) + j] == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("hvp matches finite differences of the gradient") {
  const Dataset& ds = small_data();
  Rng rng(77);
  for (ModelKind kind : {ModelKind::ridge, ModelKind::logistic, ModelKind::mlp2}) {
    const ModelSpec spec = spec_of(kind, ds.p, ds.classes, 4, 0.2);
    for (int trial = 0; trial < 20; ++trial) {
      const Params params = oracles::random_params(spec, rng);
      const auto batch = oracles::random_batch(ds.n, 6, rng);
      const Vector v = oracles::random_vector(spec.parameter_count(), rng);
      const Vector hv = hvp(params, ds, batch, v);
      const double eps = 1e-4 * std::max(1e-12, params.theta.norm()) /
                         std::max(1e-12, v.norm());
      const Vector fd = oracles::fd_hvp(params, ds, batch, v, eps);
      CHECK((hv - fd).norm() / std::max(1e-300, hv.norm()) < 1e-5);
    }
  }
}

TEST_CASE("hvp trivial cases") {
  const Dataset& ds = small_data();
  const ModelSpec spec = spec_of(ModelKind::logistic, ds.p, ds.classes, 0, 0.4);
  Rng rng(3);
  const Params params = oracles::random_params(spec, rng);
  const auto ids = ds.all_ids();

  // zero vector maps to zero
  CHECK(hvp(params, ds, ids, Vector::Zero(spec.parameter_count())).norm() == 0.0);

  // the l2 term contributes l2*v
  const Vector v = oracles::random_vector(spec.parameter_count(), rng);
  const ModelSpec no_reg = spec_of(ModelKind::logistic, ds.p, ds.classes, 0, 0.0);
  const Params bare = make_params(no_reg, params.theta);
  const Vector with_reg = hvp(params, ds, ids, v);
  const Vector without = hvp(bare, ds, ids, v);
  CHECK((with_reg - without - 0.4 * v).norm() < 1e-12 * v.norm());
}

TEST_CASE("hvp linearity and symmetry") {
  const Dataset& ds = small_data();
  Rng rng(13);
  for (ModelKind kind : {ModelKind::ridge, ModelKind::logistic, ModelKind::mlp2}) {
    const ModelSpec spec = spec_of(kind, ds.p, ds.classes, 4, 0.1);
    const Params params = oracles::random_params(spec, rng);
    const auto batch = oracles::random_batch(ds.n, 8, rng);
    const HvpContext ctx(params, ds, batch);
    const Vector u = oracles::random_vector(spec.parameter_count(), rng);
    const Vector v = oracles::random_vector(spec.parameter_count(), rng);

    const Vector lhs = ctx.apply(2.0 * u + 3.0 * v);
    const Vector rhs = 2.0 * ctx.apply(u) + 3.0 * ctx.apply(v);
    CHECK((lhs - rhs).lpNorm<Eigen::Infinity>() < 1e-12 * rhs.norm());

    const double uv = u.dot(ctx.apply(v));
    const double vu = v.dot(ctx.apply(u));
    CHECK(std::abs(uv - vu) <= 1e-10 * std::max(std::abs(uv), 1.0));
  }
}

TEST_CASE("ridge hessian is constant in theta") {
  const Dataset& ds = small_data();
  const ModelSpec spec = spec_of(ModelKind::ridge, ds.p, ds.classes, 0, 0.2);
  Rng rng(99);
  const Params a = oracles::random_params(spec, rng);
  const Params b = oracles::random_params(spec, rng);
  const auto batch = oracles::random_batch(ds.n, 7, rng);
  const Vector v = oracles::random_vector(spec.parameter_count(), rng);
  const Vector ha = hvp(a, ds, batch, v);
  const Vector hb = hvp(b, ds, batch, v);
  CHECK((ha - hb).lpNorm<Eigen::Infinity>() < 1e-12 * ha.norm());
}

TEST_CASE("logistic plus l2 is strongly convex") {
  const Dataset& ds = small_data();
  const ModelSpec spec = spec_of(ModelKind::logistic, ds.p, ds.classes, 0, 0.5);
  Rng rng(55);
  const Params params = oracles::random_params(spec, rng);
  const auto ids = ds.all_ids();
  const HvpContext ctx(params, ds, ids);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector v = oracles::random_vector(spec.parameter_count(), rng);
    CHECK(v.dot(ctx.apply(v)) >= 0.5 * v.squaredNorm() - 1e-10);
  }
}

TEST_CASE("full_hessian structure") {
  const Dataset& ds = small_data();
  const ModelSpec spec = spec_of(ModelKind::ridge, ds.p, ds.classes, 0, 0.3);
  Rng rng(8);
  const Params params = oracles::random_params(spec, rng);
  const auto batch = oracles::random_batch(ds.n, 5, rng);
  const Matrix h = full_hessian(params, ds, batch);

  // symmetry
  CHECK((h - h.transpose()).lpNorm<Eigen::Infinity>() <= 1e-9);

  // columns equal hvp against basis vectors exactly
  const HvpContext ctx(params, ds, batch);
  Vector e = Vector::Zero(spec.parameter_count());
  for (Index j : {Index(0), Index(3), spec.parameter_count() - 1}) {
    e.setZero();
    e[j] = 1.0;
    CHECK((h.col(j) - ctx.apply(e)).lpNorm<Eigen::Infinity>() == 0.0);
  }

  // ridge closed form: per-class blocks of (1/|B|) sum [x;1][x;1]^T + l2*I
  const Index cols = spec.input_dim + 1;
  Matrix block = Matrix::Zero(cols, cols);
  for (std::size_t id : batch) {
    Vector xt(cols);
    xt.head(spec.input_dim) = ds.examples[id].features;
    xt[spec.input_dim] = 1.0;
    block += xt * xt.transpose();
  }
  block /= static_cast<double>(batch.size());
  for (int k = 0; k < spec.classes; ++k) {
    Matrix sub = h.block(k * cols, k * cols, cols, cols);
    sub.diagonal().array() -= 0.3;
    CHECK((sub - block).lpNorm<Eigen::Infinity>() < 1e-12);
  }

  // constant in theta for quadratic loss
  const Params other = oracles::random_params(spec, rng);
  const Matrix h2 = full_hessian(other, ds, batch);
  CHECK((h - h2).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("full_hessian refuses oversized problems") {
  const ModelSpec spec = spec_of(ModelKind::logistic, 2000, 5);
  const Params params = make_params(spec, Vector::Zero(spec.parameter_count()));
  const Dataset& ds = small_data();
  (void)params;
  const ModelSpec small = spec_of(ModelKind::logistic, ds.p, ds.classes);
  const Params ok = make_params(small, Vector::Zero(small.parameter_count()));
  const auto ids = ds.all_ids();
  CHECK_THROWS_WITH_AS(full_hessian(ok, ds, ids, 10),
                       doctest::Contains("exceeds cap"), ConfigError);
}

TEST_CASE("estimate_constants on a trained logistic model") {
  const Dataset ds = make_synthetic(2, 100, 8, 3.0, 4);
  const ModelSpec spec = spec_of(ModelKind::logistic, ds.p, ds.classes, 0, 0.5);
  TrainConfig cfg;
  cfg.eta0 = 0.05;
  cfg.decay = 0.995;
  cfg.epochs = 5;
  cfg.batch_size = 20;
  cfg.seed = 6;
  const BatchSchedule schedule =
      build_schedule(ds.n, cfg.batch_size, cfg.epochs, cfg.eta0, cfg.decay, cfg.seed);
  auto [params, traj] = train(spec, ds, schedule, cfg, init_params(spec, 6));

  const RegularityConstants consts =
      estimate_constants(params, ds, schedule, traj.observed_max_grad);
  CHECK(consts.lambda_min >= 0.5);
  CHECK(consts.lambda_min <= consts.smoothness);
  CHECK(consts.grad_bound == traj.observed_max_grad);
  CHECK(consts.rho == doctest::Approx(consts.rho_for(0.05)));
  CHECK(consts.source == RegularityConstants::Source::estimated);

  // rho formula spot checks
  RegularityConstants manual;
  manual.lambda_min = 0.5;
  manual.smoothness = 10.0;
  CHECK(manual.rho_for(0.05) == doctest::Approx(0.975));
  const double eta_balance = 2.0 / (0.5 + 10.0);
  CHECK(std::abs(1.0 - eta_balance * 0.5) ==
        doctest::Approx(std::abs(1.0 - eta_balance * 10.0)));
  CHECK(manual.rho_for(eta_balance) == doctest::Approx((10.0 - 0.5) / (10.0 + 0.5)));

  // clip threshold dominates G when clipping is active
  const RegularityConstants clipped =
      estimate_constants(params, ds, schedule, traj.observed_max_grad, 25.0);
  CHECK(clipped.grad_bound == 25.0);
}

TEST_CASE("predict argmax and tie-breaking") {
  const Dataset& ds = small_data();
  const ModelSpec spec = spec_of(ModelKind::logistic, ds.p, ds.classes);
  const Params zero = make_params(spec, Vector::Zero(spec.parameter_count()));
  for (int label : predict(zero, ds)) CHECK(label == 0);  // ties -> class 0

  const Dataset sep = make_synthetic(2, 400, 10, 4.0, 2);
  const ModelSpec spec2 = spec_of(ModelKind::logistic, sep.p, sep.classes, 0, 1e-4);
  TrainConfig cfg;
  cfg.eta0 = 0.3;
  cfg.decay = 1.0;
  cfg.epochs = 50;
  cfg.batch_size = 80;
  cfg.seed = 10;
  const BatchSchedule schedule =
      build_schedule(sep.n, cfg.batch_size, cfg.epochs, cfg.eta0, cfg.decay, cfg.seed);
  auto [params, traj] = train(spec2, sep, schedule, cfg, init_params(spec2, 10));
  (void)traj;
  const std::vector<int> preds = predict(params, sep);
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i] >= 0);
    CHECK(preds[i] < sep.classes);
    if (preds[i] == sep.examples[i].label) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(sep.n) >= 0.95);
}

TEST_CASE("params serialization round trip") {
  const ModelSpec spec = spec_of(ModelKind::mlp2, 7, 3, 5, 0.25);
  Rng rng(2);
  const Params params = oracles::random_params(spec, rng);
  const auto path = std::filesystem::temp_directory_path() / "hfu_params.bin";
  save_params(params, path);
  const Params back = load_params(path);
  CHECK(back.spec.kind == spec.kind);
  CHECK(back.spec.input_dim == spec.input_dim);
  CHECK(back.spec.classes == spec.classes);
  CHECK(back.spec.hidden == spec.hidden);
  CHECK(back.spec.l2_coeff == spec.l2_coeff);
  CHECK(back.theta == params.theta);
  CHECK(params_digest(back) == params_digest(params));
}

TEST_CASE("dimension mismatches are rejected") {
  const Dataset& ds = small_data();
  const ModelSpec wrong = spec_of(ModelKind::logistic, ds.p + 1, ds.classes);
  const Params params = make_params(wrong, Vector::Zero(wrong.parameter_count()));
  const auto ids = ds.all_ids();
  CHECK_THROWS_AS(loss(params, ds, ids), ConfigError);
  CHECK_THROWS_AS(grad(params, ds, ids), ConfigError);
  CHECK_THROWS_AS(make_params(spec_of(ModelKind::logistic, 4, 2), Vector::Zero(3)),
                  ConfigError);
}
