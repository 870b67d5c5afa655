#include "hfu/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace hfu {

namespace {

using ConstWeights = Eigen::Map<const RowMatrix>;
using MutWeights = Eigen::Map<RowMatrix>;

void check_spec(const ModelSpec& spec) {
  require(spec.input_dim >= 1, "model: input_dim must be >= 1");
  require(spec.classes >= 2, "model: need at least two classes");
  require(spec.l2_coeff >= 0.0, "model: l2_coeff must be >= 0");
  if (spec.kind == ModelKind::mlp2) {
    require(spec.hidden >= 1, "model: mlp2 needs hidden width >= 1");
  }
}

void check_example(const ModelSpec& spec, const Example& ex) {
  if (ex.features.size() != spec.input_dim) {
    throw ConfigError("model: feature dimension mismatch");
  }
  if (ex.label < 0 || ex.label >= spec.classes) {
    throw ConfigError("model: label out of range");
  }
}

Vector softmax(const Vector& scores) {
  const double m = scores.maxCoeff();
  Vector p = (scores.array() - m).exp();
  p /= p.sum();
  return p;
}

// Linear scores for ridge/logistic: theta maps to a K x (p+1) row-major
// weight matrix, last column the bias.
Vector linear_scores(const ModelSpec& spec, const Vector& theta,
                     const Vector& x) {
  ConstWeights w(theta.data(), spec.classes, spec.input_dim + 1);
  return w.leftCols(spec.input_dim) * x + w.col(spec.input_dim);
}

struct MlpForward {
  Vector a1;   // tanh activations
  Vector t1;   // 1 - a1^2
  Vector scores;
};

MlpForward mlp_forward(const ModelSpec& spec, const Vector& theta,
                       const Vector& x) {
  const Index p = spec.input_dim;
  const Index h = spec.hidden;
  ConstWeights w1(theta.data(), h, p + 1);
  ConstWeights w2(theta.data() + h * (p + 1), spec.classes, h + 1);
  MlpForward f;
  Vector z1 = w1.leftCols(p) * x + w1.col(p);
  f.a1 = z1.array().tanh();
  f.t1 = 1.0 - f.a1.array().square();
  f.scores = w2.leftCols(h) * f.a1 + w2.col(h);
  return f;
}

Vector scores_of(const Params& params, const Example& ex) {
  if (params.spec.kind == ModelKind::mlp2) {
    return mlp_forward(params.spec, params.theta, ex.features).scores;
  }
  return linear_scores(params.spec, params.theta, ex.features);
}

// Accumulates r * [x;1]^T into the K x (p+1) block at `block`.
void add_outer(MutWeights block, const Vector& r, const Vector& x) {
  block.leftCols(x.size()).noalias() += r * x.transpose();
  block.col(x.size()) += r;
}

}  // namespace

Index ModelSpec::parameter_count() const {
  switch (kind) {
    case ModelKind::ridge:
    case ModelKind::logistic:
      return static_cast<Index>(classes) * (input_dim + 1);
    case ModelKind::mlp2:
      return hidden * (input_dim + 1) + static_cast<Index>(classes) * (hidden + 1);
  }
  throw ConfigError("model: unknown kind");
}

uint64_t ModelSpec::digest() const {
  Fnv1a h;
  h.update_value(static_cast<uint32_t>(kind));
  h.update_value(static_cast<uint64_t>(input_dim));
  h.update_value(static_cast<uint64_t>(classes));
  h.update_value(static_cast<uint64_t>(hidden));
  h.update_value(l2_coeff);
  return h.digest();
}

Params make_params(const ModelSpec& spec, Vector theta) {
  check_spec(spec);
  require(theta.size() == spec.parameter_count(),
          "model: parameter vector length does not match spec");
  return Params{spec, std::move(theta)};
}

uint64_t params_digest(const Params& params) {
  Fnv1a h;
  h.update_value(params.spec.digest());
  h.update_doubles({params.theta.data(), static_cast<std::size_t>(params.theta.size())});
  return h.digest();
}

void save_params(const Params& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("params: cannot write " + path.string());
  out.write("HFPW", 4);
  const uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const uint32_t kind = static_cast<uint32_t>(params.spec.kind);
  const uint64_t p = static_cast<uint64_t>(params.spec.input_dim);
  const uint64_t k = static_cast<uint64_t>(params.spec.classes);
  const uint64_t h = static_cast<uint64_t>(params.spec.hidden);
  out.write(reinterpret_cast<const char*>(&kind), 4);
  out.write(reinterpret_cast<const char*>(&p), 8);
  out.write(reinterpret_cast<const char*>(&k), 8);
  out.write(reinterpret_cast<const char*>(&h), 8);
  out.write(reinterpret_cast<const char*>(&params.spec.l2_coeff), 8);
  out.write(reinterpret_cast<const char*>(params.theta.data()),
            static_cast<std::streamsize>(sizeof(double) * params.theta.size()));
  if (!out) throw IoError("params: short write to " + path.string());
}

Params load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("params: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HFPW", 4) != 0) {
    throw IoError("params: bad magic in " + path.string());
  }
  uint32_t version = 0, kind = 0;
  uint64_t p = 0, k = 0, h = 0;
  double l2 = 0.0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&kind), 4);
  in.read(reinterpret_cast<char*>(&p), 8);
  in.read(reinterpret_cast<char*>(&k), 8);
  in.read(reinterpret_cast<char*>(&h), 8);
  in.read(reinterpret_cast<char*>(&l2), 8);
  if (!in || version != 1) throw IoError("params: unsupported header in " + path.string());
  ModelSpec spec;
  spec.kind = static_cast<ModelKind>(kind);
  spec.input_dim = static_cast<Index>(p);
  spec.classes = static_cast<int>(k);
  spec.hidden = static_cast<Index>(h);
  spec.l2_coeff = l2;
  Vector theta(spec.parameter_count());
  in.read(reinterpret_cast<char*>(theta.data()),
          static_cast<std::streamsize>(sizeof(double) * theta.size()));
  if (!in) throw IoError("params: truncated payload in " + path.string());
  return make_params(spec, std::move(theta));
}

double loss_one(const Params& params, const Example& ex) {
  check_example(params.spec, ex);
  const Vector s = scores_of(params, ex);
  double data = 0.0;
  if (params.spec.kind == ModelKind::ridge) {
    Vector r = s;
    r[ex.label] -= 1.0;
    data = 0.5 * r.squaredNorm();
  } else {
    const double m = s.maxCoeff();
    data = m + std::log((s.array() - m).exp().sum()) - s[ex.label];
  }
  return data + 0.5 * params.spec.l2_coeff * params.theta.squaredNorm();
}

Vector grad_one(const Params& params, const Example& ex) {
  check_example(params.spec, ex);
  const ModelSpec& spec = params.spec;
  Vector g = spec.l2_coeff * params.theta;
  if (spec.kind == ModelKind::mlp2) {
    const Index p = spec.input_dim;
    const Index h = spec.hidden;
    const MlpForward f = mlp_forward(spec, params.theta, ex.features);
    Vector r = softmax(f.scores);
    r[ex.label] -= 1.0;
    ConstWeights w2(params.theta.data() + h * (p + 1), spec.classes, h + 1);
    const Vector dz1 = (w2.leftCols(h).transpose() * r).cwiseProduct(f.t1);
    MutWeights g1(g.data(), h, p + 1);
    MutWeights g2(g.data() + h * (p + 1), spec.classes, h + 1);
    add_outer(g1, dz1, ex.features);
    add_outer(g2, r, f.a1);
    return g;
  }
  Vector s = linear_scores(spec, params.theta, ex.features);
  Vector r = spec.kind == ModelKind::ridge ? s : softmax(s);
  r[ex.label] -= 1.0;
  MutWeights gw(g.data(), spec.classes, spec.input_dim + 1);
  add_outer(gw, r, ex.features);
  return g;
}

double loss(const Params& params, const Dataset& ds,
            std::span<const std::size_t> ids) {
  require(!ids.empty(), "loss: empty example list");
  double data = 0.0;
  for (std::size_t id : ids) {
    const Example& ex = ds.examples.at(id);
    check_example(params.spec, ex);
    const Vector s = scores_of(params, ex);
    if (params.spec.kind == ModelKind::ridge) {
      Vector r = s;
      r[ex.label] -= 1.0;
      data += 0.5 * r.squaredNorm();
    } else {
      const double m = s.maxCoeff();
      data += m + std::log((s.array() - m).exp().sum()) - s[ex.label];
    }
  }
  return data / static_cast<double>(ids.size()) +
         0.5 * params.spec.l2_coeff * params.theta.squaredNorm();
}

double loss(const Params& params, const Dataset& ds) {
  const auto ids = ds.all_ids();
  return loss(params, ds, ids);
}

Vector grad(const Params& params, const Dataset& ds,
            std::span<const std::size_t> ids) {
  require(!ids.empty(), "grad: empty example list");
  Vector acc = Vector::Zero(params.theta.size());
  for (std::size_t id : ids) {
    acc += grad_one(params, ds.examples.at(id));
  }
  return acc / static_cast<double>(ids.size());
}

Vector grad(const Params& params, const Dataset& ds) {
  const auto ids = ds.all_ids();
  return grad(params, ds, ids);
}

HvpContext::HvpContext(const Params& params, const Dataset& ds,
                       std::span<const std::size_t> ids)
    : params_(&params), ds_(&ds), ids_(ids.begin(), ids.end()) {
  require(!ids_.empty(), "hvp: empty example list");
  const ModelSpec& spec = params.spec;
  const Index b = static_cast<Index>(ids_.size());
  if (spec.kind == ModelKind::ridge) return;

  softmax_.resize(spec.classes, b);
  if (spec.kind == ModelKind::mlp2) {
    hidden_.resize(spec.hidden, b);
    hidden_d_.resize(spec.hidden, b);
    resid_.resize(spec.classes, b);
    back_.resize(spec.hidden, b);
  }
  const Index p = spec.input_dim;
  const Index h = spec.hidden;
  for (Index j = 0; j < b; ++j) {
    const Example& ex = ds.examples.at(ids_[static_cast<std::size_t>(j)]);
    check_example(spec, ex);
    if (spec.kind == ModelKind::logistic) {
      softmax_.col(j) = softmax(linear_scores(spec, params.theta, ex.features));
    } else {
      const MlpForward f = mlp_forward(spec, params.theta, ex.features);
      hidden_.col(j) = f.a1;
      hidden_d_.col(j) = f.t1;
      softmax_.col(j) = softmax(f.scores);
      Vector r = softmax_.col(j);
      r[ex.label] -= 1.0;
      resid_.col(j) = r;
      ConstWeights w2(params.theta.data() + h * (p + 1), spec.classes, h + 1);
      back_.col(j) = w2.leftCols(h).transpose() * r;
    }
  }
}

Vector HvpContext::apply_one_data_cached(std::size_t pos, const Vector& v) const {
  const ModelSpec& spec = params_->spec;
  const Example& ex = ds_->examples.at(ids_[pos]);
  const Index p = spec.input_dim;
  Vector out = Vector::Zero(params_->theta.size());

  if (spec.kind != ModelKind::mlp2) {
    ConstWeights vw(v.data(), spec.classes, p + 1);
    Vector sv = vw.leftCols(p) * ex.features + vw.col(p);
    Vector jv;
    if (spec.kind == ModelKind::ridge) {
      jv = std::move(sv);
    } else {
      const auto pr = softmax_.col(static_cast<Index>(pos));
      jv = pr.cwiseProduct(sv) - pr * pr.dot(sv);
    }
    MutWeights ow(out.data(), spec.classes, p + 1);
    add_outer(ow, jv, ex.features);
    return out;
  }

  const Index h = spec.hidden;
  const Index j = static_cast<Index>(pos);
  ConstWeights w2(params_->theta.data() + h * (p + 1), spec.classes, h + 1);
  ConstWeights v1(v.data(), h, p + 1);
  ConstWeights v2(v.data() + h * (p + 1), spec.classes, h + 1);
  const auto a1 = hidden_.col(j);
  const auto t1 = hidden_d_.col(j);
  const auto pr = softmax_.col(j);
  const auto rs = resid_.col(j);
  const auto da1 = back_.col(j);

  // Forward tangent along v, then tangent of the reverse pass.
  const Vector z1_dot = v1.leftCols(p) * ex.features + v1.col(p);
  const Vector a1_dot = t1.cwiseProduct(z1_dot);
  const Vector s_dot = v2.leftCols(h) * a1 + v2.col(h) + w2.leftCols(h) * a1_dot;
  const Vector ds_dot = pr.cwiseProduct(s_dot) - pr * pr.dot(s_dot);
  const Vector da1_dot =
      v2.leftCols(h).transpose() * rs + w2.leftCols(h).transpose() * ds_dot;
  const Vector dz1_dot = da1_dot.cwiseProduct(t1) -
                         2.0 * da1.cwiseProduct(a1).cwiseProduct(a1_dot);

  MutWeights o1(out.data(), h, p + 1);
  MutWeights o2(out.data() + h * (p + 1), spec.classes, h + 1);
  add_outer(o1, dz1_dot, ex.features);
  o2.leftCols(h).noalias() += ds_dot * a1.transpose() + rs * a1_dot.transpose();
  o2.col(h) += ds_dot;
  return out;
}

Vector HvpContext::apply_data_sum(const Vector& v) const {
  require(v.size() == params_->theta.size(), "hvp: vector dimension mismatch");
  Vector acc = Vector::Zero(v.size());
  for (std::size_t pos = 0; pos < ids_.size(); ++pos) {
    acc += apply_one_data_cached(pos, v);
  }
  return acc;
}

Vector HvpContext::apply_one_data(std::size_t id, const Vector& v) const {
  require(v.size() == params_->theta.size(), "hvp: vector dimension mismatch");
  for (std::size_t pos = 0; pos < ids_.size(); ++pos) {
    if (ids_[pos] == id) return apply_one_data_cached(pos, v);
  }
  throw ConfigError("hvp: id not in batch");
}

Vector HvpContext::apply(const Vector& v) const {
  Vector out = apply_data_sum(v) / static_cast<double>(ids_.size());
  out += params_->spec.l2_coeff * v;
  return out;
}

Vector HvpContext::apply_excluding(const Vector& v, std::size_t excluded) const {
  const double b = static_cast<double>(ids_.size());
  Vector out = (apply_data_sum(v) - apply_one_data(excluded, v)) / b;
  out += params_->spec.l2_coeff * ((b - 1.0) / b) * v;
  return out;
}

Vector hvp(const Params& params, const Dataset& ds,
           std::span<const std::size_t> ids, const Vector& v) {
  return HvpContext(params, ds, ids).apply(v);
}

Matrix full_hessian(const Params& params, const Dataset& ds,
                    std::span<const std::size_t> ids, Index cap) {
  const Index d = params.theta.size();
  if (d > cap) {
    throw ConfigError("full_hessian: d=" + std::to_string(d) + " exceeds cap " +
                      std::to_string(cap) +
                      " (explicit-Hessian baselines infeasible at this scale)");
  }
  const HvpContext ctx(params, ds, ids);
  Matrix h(d, d);
  Vector e = Vector::Zero(d);
  for (Index j = 0; j < d; ++j) {
    e[j] = 1.0;
    h.col(j) = ctx.apply(e);
    e[j] = 0.0;
  }
  return h;
}

std::vector<int> predict(const Params& params, const Dataset& ds,
                         std::span<const std::size_t> ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    const Example& ex = ds.examples.at(id);
    check_example(params.spec, ex);
    const Vector s = scores_of(params, ex);
    Index best = 0;
    for (Index k = 1; k < s.size(); ++k) {
      if (s[k] > s[best]) best = k;  // ties keep the lowest class index
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::vector<int> predict(const Params& params, const Dataset& ds) {
  const auto ids = ds.all_ids();
  return predict(params, ds, ids);
}

double RegularityConstants::rho_for(double eta) const {
  return std::max(std::abs(1.0 - eta * lambda_min),
                  std::abs(1.0 - eta * smoothness));
}

RegularityConstants estimate_constants(const Params& params, const Dataset& ds,
                                       const BatchSchedule& schedule,
                                       double observed_max_grad,
                                       std::optional<double> clip_threshold) {
  const auto ids = ds.all_ids();
  const HvpContext ctx(params, ds, ids);
  const LinearOperator apply = [&](const Vector& v) { return ctx.apply(v); };
  const Index d = params.theta.size();

  const PowerIterationResult top = power_iteration(apply, d, 2000, 1e-9);
  RegularityConstants consts;
  consts.smoothness = 1.05 * top.value;  // under-estimating M breaks rho
  const PowerIterationResult bottom =
      min_eigenvalue(apply, consts.smoothness, d, 2000, 1e-9);
  consts.lambda_min =
      std::min(std::max(params.spec.l2_coeff, bottom.value), consts.smoothness);
  consts.grad_bound = clip_threshold
                          ? std::max(observed_max_grad, *clip_threshold)
                          : observed_max_grad;
  consts.rho = consts.rho_for(schedule.eta0);
  consts.source = (top.converged && bottom.converged)
                      ? RegularityConstants::Source::estimated
                      : RegularityConstants::Source::estimated_unconverged;
  return consts;
}

}  // namespace hfu
