#include "hfu/harness.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace hfu {

namespace {

using SteadyClock = std::chrono::steady_clock;

double seconds_since(SteadyClock::time_point t0) {
  return std::chrono::duration<double>(SteadyClock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string();
}

std::string fmt_opt(const std::optional<std::uint64_t>& v) {
  return v ? std::to_string(*v) : std::string();
}

}  // namespace

Dataset DatasetConfig::build_train() const {
  switch (kind) {
    case Kind::synthetic:
      return make_synthetic(classes, per_class, dim, separation, data_seed);
    case Kind::csv: {
      CsvSchema schema;
      schema.has_header = csv_header;
      schema.classes = csv_classes;
      schema.label_column = csv_label;
      // all columns except the label are features; resolved by header
      Dataset probe = [&] {
        std::ifstream in(csv_path);
        if (!in) throw IoError("config: cannot open csv " + csv_path);
        std::string first;
        std::getline(in, first);
        const auto cells = [&] {
          std::vector<std::string> out;
          std::stringstream ss(first);
          std::string cell;
          while (std::getline(ss, cell, ',')) out.push_back(cell);
          return out;
        }();
        for (std::size_t i = 0; i < cells.size(); ++i) {
          const bool is_label = csv_header ? cells[i] == csv_label
                                           : std::to_string(i) == csv_label;
          if (!is_label) schema.feature_columns.emplace_back(static_cast<int>(i));
        }
        if (csv_header) {
          schema.label_column = csv_label;
        } else {
          schema.label_column = std::stoi(csv_label);
        }
        return load_csv(csv_path, schema);
      }();
      return probe;
    }
    case Kind::idx:
      return load_idx(idx_images, idx_labels);
  }
  throw ConfigError("config: unknown dataset kind");
}

Dataset DatasetConfig::build_test() const {
  switch (kind) {
    case Kind::synthetic: {
      // Disjoint stream from the training draw.
      return make_synthetic(classes, test_per_class, dim, separation,
                            data_seed ^ 0x7465737473657464ULL);
    }
    case Kind::csv: {
      DatasetConfig test = *this;
      require(!csv_test_path.empty(), "config: csv_test_path not set");
      test.csv_path = csv_test_path;
      return test.build_train();
    }
    case Kind::idx: {
      DatasetConfig test = *this;
      require(!idx_test_images.empty() && !idx_test_labels.empty(),
              "config: idx test paths not set");
      test.idx_images = idx_test_images;
      test.idx_labels = idx_test_labels;
      return test.build_train();
    }
  }
  throw ConfigError("config: unknown dataset kind");
}

namespace {

std::string canonical_config_text(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "name=" << cfg.name << "\n";
  out << "dataset=" << static_cast<int>(cfg.data.kind) << "\n";
  out << "classes=" << cfg.data.classes << "\n";
  out << "per_class=" << cfg.data.per_class << "\n";
  out << "dim=" << cfg.data.dim << "\n";
  out << "separation=" << fmt(cfg.data.separation) << "\n";
  out << "data_seed=" << cfg.data.data_seed << "\n";
  out << "test_per_class=" << cfg.data.test_per_class << "\n";
  out << "csv=" << cfg.data.csv_path << "|" << cfg.data.csv_test_path << "|"
      << cfg.data.csv_label << "|" << cfg.data.csv_header << "|"
      << cfg.data.csv_classes << "\n";
  out << "idx=" << cfg.data.idx_images << "|" << cfg.data.idx_labels << "|"
      << cfg.data.idx_test_images << "|" << cfg.data.idx_test_labels << "\n";
  out << "model=" << static_cast<int>(cfg.model.kind) << "\n";
  out << "hidden=" << cfg.model.hidden << "\n";
  out << "l2=" << fmt(cfg.model.l2_coeff) << "\n";
  out << "eta0=" << fmt(cfg.train.eta0) << "\n";
  out << "decay=" << fmt(cfg.train.decay) << "\n";
  out << "epochs=" << cfg.train.epochs << "\n";
  out << "batch_size=" << cfg.train.batch_size << "\n";
  out << "clip=" << fmt(cfg.train.clip_threshold.value_or(0.0)) << "\n";
  out << "seeds=";
  for (uint64_t s : cfg.seeds) out << s << ",";
  out << "\nrates=";
  for (double r : cfg.rates) out << fmt(r) << ",";
  out << "\nmethods=";
  for (const auto& m : cfg.methods) out << m << ",";
  out << "\nepsilon=" << fmt(cfg.budget.epsilon) << "\n";
  out << "delta=" << fmt(cfg.budget.delta) << "\n";
  out << "allow_large_epsilon=" << cfg.budget.allow_epsilon_above_one << "\n";
  out << "sensitivity=" << static_cast<int>(cfg.sensitivity) << "\n";
  out << "damping=" << fmt(cfg.damping) << "\n";
  out << "finetune=" << fmt(cfg.finetune_cfg.eta0) << "|" << cfg.finetune_cfg.epochs
      << "|" << cfg.finetune_cfg.batch_size << "\n";
  out << "neggrad=" << fmt(cfg.neggrad_cfg.eta0) << "|" << cfg.neggrad_cfg.epochs
      << "|" << cfg.neggrad_cfg.batch_size << "|"
      << fmt(cfg.neggrad_cfg.clip_threshold.value_or(0.0)) << "\n";
  return out.str();
}

}  // namespace

uint64_t ExperimentConfig::digest() const {
  const std::string text = canonical_config_text(*this);
  Fnv1a h;
  h.update(text.data(), text.size());
  return h.digest();
}

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(text);
  while (std::getline(ss, cell, ',')) {
    cell.erase(0, cell.find_first_not_of(" \t"));
    const auto end = cell.find_last_not_of(" \t");
    if (end != std::string::npos) cell.erase(end + 1);
    if (!cell.empty()) out.push_back(cell);
  }
  return out;
}

std::map<std::string, std::string> read_flat_keys(const std::filesystem::path& path) {
  std::map<std::string, std::string> kv;
  if (path.extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: expected a flat JSON object");
    for (const auto& [key, value] : j.items()) {
      if (value.is_string()) {
        kv[key] = value.get<std::string>();
      } else if (value.is_boolean()) {
        kv[key] = value.get<bool>() ? "1" : "0";
      } else if (value.is_number()) {
        std::ostringstream os;
        os << value;
        kv[key] = os.str();
      } else if (value.is_array()) {
        std::ostringstream os;
        bool first = true;
        for (const auto& item : value) {
          if (!first) os << ",";
          first = false;
          os << (item.is_string() ? item.get<std::string>()
                                  : nlohmann::to_string(item));
        }
        kv[key] = os.str();
      } else {
        throw ConfigError("config: unsupported value for key '" + key + "'");
      }
    }
    return kv;
  }
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " is not key = value");
    }
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      const auto end = s.find_last_not_of(" \t\r");
      s.erase(end == std::string::npos ? 0 : end + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: " + value);
  }
}

long to_long(const std::string& key, const std::string& value) {
  const double v = to_double(key, value);
  if (v != std::floor(v)) {
    throw ConfigError("config: key '" + key + "' is not an integer: " + value);
  }
  return static_cast<long>(v);
}

}  // namespace

ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto kv = read_flat_keys(path);
  ExperimentConfig cfg;
  const auto get = [&](const std::string& key) -> std::optional<std::string> {
    const auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };

  static const std::vector<std::string> known = {
      "name", "dataset", "classes", "per_class", "dim", "separation",
      "data_seed", "test_per_class", "csv_path", "csv_test_path", "csv_label",
      "csv_header", "csv_classes", "idx_images", "idx_labels",
      "idx_test_images", "idx_test_labels", "model", "hidden", "l2", "eta0",
      "decay", "epochs", "batch_size", "clip", "seeds", "rates", "methods",
      "epsilon", "delta", "allow_large_epsilon", "sensitivity", "damping",
      "finetune_epochs", "finetune_eta0", "finetune_batch", "neggrad_epochs",
      "neggrad_eta0", "neggrad_batch", "neggrad_clip", "parallel", "out"};
  for (const auto& [key, value] : kv) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }

  if (auto v = get("name")) cfg.name = *v;
  if (auto v = get("dataset")) {
    if (*v == "synthetic") cfg.data.kind = DatasetConfig::Kind::synthetic;
    else if (*v == "csv") cfg.data.kind = DatasetConfig::Kind::csv;
    else if (*v == "idx") cfg.data.kind = DatasetConfig::Kind::idx;
    else throw ConfigError("config: unknown dataset kind '" + *v + "'");
  }
  if (auto v = get("classes")) cfg.data.classes = static_cast<int>(to_long("classes", *v));
  if (auto v = get("per_class")) cfg.data.per_class = static_cast<int>(to_long("per_class", *v));
  if (auto v = get("dim")) cfg.data.dim = static_cast<int>(to_long("dim", *v));
  if (auto v = get("separation")) cfg.data.separation = to_double("separation", *v);
  if (auto v = get("data_seed")) cfg.data.data_seed = static_cast<uint64_t>(to_long("data_seed", *v));
  if (auto v = get("test_per_class")) cfg.data.test_per_class = static_cast<int>(to_long("test_per_class", *v));
  if (auto v = get("csv_path")) cfg.data.csv_path = *v;
  if (auto v = get("csv_test_path")) cfg.data.csv_test_path = *v;
  if (auto v = get("csv_label")) cfg.data.csv_label = *v;
  if (auto v = get("csv_header")) cfg.data.csv_header = to_long("csv_header", *v) != 0;
  if (auto v = get("csv_classes")) cfg.data.csv_classes = static_cast<int>(to_long("csv_classes", *v));
  if (auto v = get("idx_images")) cfg.data.idx_images = *v;
  if (auto v = get("idx_labels")) cfg.data.idx_labels = *v;
  if (auto v = get("idx_test_images")) cfg.data.idx_test_images = *v;
  if (auto v = get("idx_test_labels")) cfg.data.idx_test_labels = *v;

  if (auto v = get("model")) {
    if (*v == "ridge") cfg.model.kind = ModelKind::ridge;
    else if (*v == "logistic") cfg.model.kind = ModelKind::logistic;
    else if (*v == "mlp2") cfg.model.kind = ModelKind::mlp2;
    else throw ConfigError("config: unknown model '" + *v + "'");
  }
  if (auto v = get("hidden")) cfg.model.hidden = to_long("hidden", *v);
  if (auto v = get("l2")) cfg.model.l2_coeff = to_double("l2", *v);

  if (auto v = get("eta0")) cfg.train.eta0 = to_double("eta0", *v);
  if (auto v = get("decay")) cfg.train.decay = to_double("decay", *v);
  if (auto v = get("epochs")) cfg.train.epochs = static_cast<int>(to_long("epochs", *v));
  if (auto v = get("batch_size")) cfg.train.batch_size = static_cast<int>(to_long("batch_size", *v));
  if (auto v = get("clip")) {
    const double clip = to_double("clip", *v);
    if (clip > 0.0) cfg.train.clip_threshold = clip;
  }
  if (auto v = get("seeds")) {
    cfg.seeds.clear();
    for (const auto& s : split_list(*v)) cfg.seeds.push_back(static_cast<uint64_t>(to_long("seeds", s)));
    require(!cfg.seeds.empty(), "config: seeds list is empty");
  }
  if (auto v = get("rates")) {
    cfg.rates.clear();
    for (const auto& s : split_list(*v)) cfg.rates.push_back(to_double("rates", s));
    require(!cfg.rates.empty(), "config: rates list is empty");
  }
  if (auto v = get("methods")) {
    cfg.methods = split_list(*v);
    require(!cfg.methods.empty(), "config: methods list is empty");
  }
  for (const auto& m : cfg.methods) {
    static const std::vector<std::string> allowed = {"hf", "retrain", "ns",
                                                     "ij", "finetune", "neggrad"};
    if (std::find(allowed.begin(), allowed.end(), m) == allowed.end()) {
      throw ConfigError("config: unknown method '" + m + "'");
    }
  }
  if (auto v = get("epsilon")) cfg.budget.epsilon = to_double("epsilon", *v);
  if (auto v = get("delta")) cfg.budget.delta = to_double("delta", *v);
  if (auto v = get("allow_large_epsilon")) {
    cfg.budget.allow_epsilon_above_one = to_long("allow_large_epsilon", *v) != 0;
  }
  if (auto v = get("sensitivity")) {
    if (*v == "oracle") cfg.sensitivity = ExperimentConfig::SensitivityMode::oracle;
    else if (*v == "bound") cfg.sensitivity = ExperimentConfig::SensitivityMode::bound;
    else throw ConfigError("config: sensitivity must be oracle or bound");
  }
  if (auto v = get("damping")) cfg.damping = to_double("damping", *v);

  // finetune/neggrad defaults follow the training config
  cfg.finetune_cfg = cfg.train;
  cfg.finetune_cfg.epochs = 2;
  cfg.neggrad_cfg = cfg.train;
  cfg.neggrad_cfg.epochs = 1;
  cfg.neggrad_cfg.batch_size = 1;
  cfg.neggrad_cfg.clip_threshold = 1.0;
  if (auto v = get("finetune_epochs")) cfg.finetune_cfg.epochs = static_cast<int>(to_long("finetune_epochs", *v));
  if (auto v = get("finetune_eta0")) cfg.finetune_cfg.eta0 = to_double("finetune_eta0", *v);
  if (auto v = get("finetune_batch")) cfg.finetune_cfg.batch_size = static_cast<int>(to_long("finetune_batch", *v));
  if (auto v = get("neggrad_epochs")) cfg.neggrad_cfg.epochs = static_cast<int>(to_long("neggrad_epochs", *v));
  if (auto v = get("neggrad_eta0")) cfg.neggrad_cfg.eta0 = to_double("neggrad_eta0", *v);
  if (auto v = get("neggrad_batch")) cfg.neggrad_cfg.batch_size = static_cast<int>(to_long("neggrad_batch", *v));
  if (auto v = get("neggrad_clip")) cfg.neggrad_cfg.clip_threshold = to_double("neggrad_clip", *v);
  if (auto v = get("parallel")) cfg.parallel_width = static_cast<int>(to_long("parallel", *v));
  if (auto v = get("out")) cfg.out_dir = *v;
  return cfg;
}

double metric_distance(const Params& w_retrain, const Params& w_method) {
  require(w_retrain.theta.size() == w_method.theta.size(),
          "metric_distance: dimension mismatch");
  return (w_retrain.theta - w_method.theta).norm();
}

CorrelationPair metric_loss_change_correlation(const Params& learned,
                                               const Params& retrained,
                                               const Vector& delta,
                                               const Dataset& ds,
                                               std::span<const std::size_t> forget) {
  require(forget.size() >= 2, "correlation: fewer than 2 pairs");
  const Params approx = make_params(learned.spec, learned.theta + delta);
  std::vector<double> approx_changes, actual_changes;
  approx_changes.reserve(forget.size());
  actual_changes.reserve(forget.size());
  for (std::size_t id : forget) {
    const Example& ex = ds.examples.at(id);
    const double base = loss_one(learned, ex);
    approx_changes.push_back(loss_one(approx, ex) - base);
    actual_changes.push_back(loss_one(retrained, ex) - base);
  }
  return CorrelationPair{pearson(approx_changes, actual_changes),
                         spearman(approx_changes, actual_changes)};
}

TrialLossChange trial_loss_change(const Params& learned, const Params& retrained,
                                  const Vector& delta, const Dataset& ds,
                                  std::span<const std::size_t> forget) {
  require(!forget.empty(), "trial_loss_change: empty forget set");
  const Params approx = make_params(learned.spec, learned.theta + delta);
  const double base = loss(learned, ds, forget);
  return TrialLossChange{loss(approx, ds, forget) - base,
                         loss(retrained, ds, forget) - base};
}

CorrelationPair correlate_trials(std::span<const TrialLossChange> trials) {
  require(trials.size() >= 2, "correlation: fewer than 2 pairs");
  std::vector<double> approx, actual;
  for (const auto& t : trials) {
    approx.push_back(t.approx);
    actual.push_back(t.actual);
  }
  return CorrelationPair{pearson(approx, actual), spearman(approx, actual)};
}

AccuracySuite accuracy_suite(const Params& params, const Dataset& test,
                             const Dataset& train,
                             std::span<const std::size_t> remaining,
                             std::span<const std::size_t> forget) {
  require(test.n > 0 && !remaining.empty() && !forget.empty(),
          "accuracy_suite: empty split");
  const auto frac_correct = [&](const Dataset& ds,
                                std::span<const std::size_t> ids) {
    const std::vector<int> preds = predict(params, ds, ids);
    long correct = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (preds[i] == ds.examples.at(ids[i]).label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ids.size());
  };
  AccuracySuite suite;
  const auto test_ids = test.all_ids();
  suite.acc_test = frac_correct(test, test_ids);
  suite.err_test = 1.0 - suite.acc_test;
  suite.err_remaining = 1.0 - frac_correct(train, remaining);
  suite.err_forget = 1.0 - frac_correct(train, forget);
  return suite;
}

std::vector<std::size_t> sample_forget_set(Index n, double rate, uint64_t seed) {
  require(rate > 0.0 && rate < 1.0, "sample_forget_set: rate must be in (0,1)");
  const auto m = std::max<long>(1, std::llround(rate * static_cast<double>(n)));
  require(m < n, "sample_forget_set: rate leaves no remaining data");
  Rng rng = Rng(seed).long_jumped(3).jumped(
      static_cast<uint64_t>(std::llround(rate * 10000.0)));
  std::vector<std::size_t> ids(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  rng.shuffle(ids);
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

std::vector<std::size_t> complement_ids(Index n, std::span<const std::size_t> forget) {
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(n) - forget.size());
  std::size_t next = 0;
  for (std::size_t id = 0; id < static_cast<std::size_t>(n); ++id) {
    if (next < forget.size() && forget[next] == id) {
      ++next;
      continue;
    }
    out.push_back(id);
  }
  return out;
}

ModelSpec resolve_model(const ExperimentConfig& cfg, const Dataset& ds) {
  ModelSpec spec = cfg.model;
  if (spec.input_dim == 0) spec.input_dim = ds.p;
  if (spec.classes == 0) spec.classes = ds.classes;
  require(spec.input_dim == ds.p, "config: model input_dim does not match data");
  require(spec.classes == ds.classes, "config: model classes do not match data");
  return spec;
}

struct SeedArtifacts {
  BatchSchedule schedule;
  RecollectResult rec;
  double t_precompute = 0.0;
};

SeedArtifacts learn_and_recollect(const ExperimentConfig& cfg,
                                  const ModelSpec& spec, const Dataset& ds,
                                  uint64_t seed) {
  SeedArtifacts art;
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  art.schedule = build_schedule(ds.n, tc.batch_size, tc.epochs, tc.eta0,
                                tc.decay, tc.seed);
  RecollectionConfig rc;
  rc.parallel_width = cfg.parallel_width;
  const auto t0 = SteadyClock::now();
  art.rec = recollect_streaming(spec, ds, art.schedule, tc, rc);
  art.t_precompute = seconds_since(t0);
  return art;
}

void fill_group_aggregates(std::vector<ResultRow>& rows,
                           const std::map<std::string, std::vector<TrialLossChange>>&
                               trials_by_group) {
  // distance min/max across seeds per (method, rate)
  std::map<std::string, std::pair<double, double>> extremes;
  const auto group_key = [](const ResultRow& row) {
    return row.method + "@" + fmt(row.deletion_rate);
  };
  for (const ResultRow& row : rows) {
    if (!row.distance) continue;
    const std::string key = group_key(row);
    auto it = extremes.find(key);
    if (it == extremes.end()) {
      extremes.emplace(key, std::make_pair(*row.distance, *row.distance));
    } else {
      it->second.first = std::min(it->second.first, *row.distance);
      it->second.second = std::max(it->second.second, *row.distance);
    }
  }
  for (ResultRow& row : rows) {
    const auto it = extremes.find(group_key(row));
    if (it != extremes.end() && row.distance) {
      row.distance_min = it->second.first;
      row.distance_max = it->second.second;
    }
    const auto trials = trials_by_group.find(group_key(row));
    if (trials != trials_by_group.end() && trials->second.size() >= 2 &&
        row.status == "ok") {
      const CorrelationPair corr = correlate_trials(trials->second);
      row.pearson_trial = corr.pearson_r;
      row.spearman_trial = corr.spearman_r;
    }
  }
}

void sort_rows(std::vector<ResultRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    if (a.axis_value != b.axis_value) return a.axis_value < b.axis_value;
    if (a.method != b.method) return a.method < b.method;
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.deletion_rate < b.deletion_rate;
  });
}

}  // namespace

ExperimentResult run_verification(const ExperimentConfig& cfg) {
  const Dataset ds = cfg.data.build_train();
  const ModelSpec spec = resolve_model(cfg, ds);
  BaselineConfig baseline_cfg;
  baseline_cfg.damping = cfg.damping;
  baseline_cfg.validate(spec);

  ExperimentResult result;
  result.name = cfg.name + "_verify";
  result.config_digest = cfg.digest();

  std::map<std::string, std::vector<TrialLossChange>> trials_by_group;

  for (uint64_t seed : cfg.seeds) {
    const SeedArtifacts art = learn_and_recollect(cfg, spec, ds, seed);
    const Params& learned = art.rec.params;
    result.final_grad_norms.emplace_back(seed, grad(learned, ds).norm());
    TrainConfig tc = cfg.train;
    tc.seed = seed;

    for (double rate : cfg.rates) {
      const std::vector<std::size_t> forget = sample_forget_set(ds.n, rate, seed);
      const std::vector<std::size_t> remaining = complement_ids(ds.n, forget);

      const RemovalView view = restrict(art.schedule, forget);
      const Params init = init_params(spec, seed);
      auto [w_ret, traj_ret] =
          retrain(spec, ds, view, tc, init, &art.rec.trajectory.provenance);
      (void)traj_ret;

      for (const std::string& method : cfg.methods) {
        ResultRow row;
        row.method = method;
        row.seed = seed;
        row.deletion_rate = rate;
        try {
          Vector delta;
          if (method == "hf") {
            delta = art.rec.store.sum_rows(forget);
          } else if (method == "retrain") {
            delta = w_ret.theta - learned.theta;
          } else if (method == "ns") {
            delta = newton_step(learned, ds, forget, cfg.damping).theta - learned.theta;
          } else if (method == "ij") {
            delta = infinitesimal_jackknife(learned, ds, forget, cfg.damping).theta -
                    learned.theta;
          } else if (method == "finetune") {
            TrainConfig ft = cfg.finetune_cfg;
            ft.seed = seed;
            delta = finetune(learned, ds.subset(remaining), ft).theta - learned.theta;
          } else if (method == "neggrad") {
            TrainConfig ng = cfg.neggrad_cfg;
            ng.seed = seed;
            delta = neggrad(learned, ds.subset(forget), ng).theta - learned.theta;
          } else {
            throw ConfigError("verify: unknown method " + method);
          }
          const Params w_method = make_params(spec, learned.theta + delta);
          row.distance = metric_distance(w_ret, w_method);
          if (forget.size() >= 2) {
            const CorrelationPair corr = metric_loss_change_correlation(
                learned, w_ret, delta, ds, forget);
            row.pearson_r = corr.pearson_r;
            row.spearman_r = corr.spearman_r;
          }
          trials_by_group[method + "@" + fmt(rate)].push_back(
              trial_loss_change(learned, w_ret, delta, ds, forget));
        } catch (const DivergenceError&) {
          row.status = "divergent";
        } catch (const std::exception&) {
          row.status = "error";
        }
        result.rows.push_back(std::move(row));
      }
    }
  }
  fill_group_aggregates(result.rows, trials_by_group);
  sort_rows(result.rows);
  return result;
}

ExperimentResult run_application(const ExperimentConfig& cfg) {
  const Dataset ds = cfg.data.build_train();
  const Dataset test = cfg.data.build_test();
  const ModelSpec spec = resolve_model(cfg, ds);

  ExperimentResult result;
  result.name = cfg.name + "_apply";
  result.config_digest = cfg.digest();
  std::filesystem::create_directories(cfg.out_dir);

  for (uint64_t seed : cfg.seeds) {
    const SeedArtifacts art = learn_and_recollect(cfg, spec, ds, seed);
    const Params& learned = art.rec.params;
    result.final_grad_norms.emplace_back(seed, grad(learned, ds).norm());
    TrainConfig tc = cfg.train;
    tc.seed = seed;

    // store I/O phase reported separately from the compute phase
    const std::filesystem::path store_path =
        std::filesystem::path(cfg.out_dir) /
        (cfg.name + "_seed" + std::to_string(seed) + ".hfun");
    const auto io_t0 = SteadyClock::now();
    store_save(art.rec.store, store_path);
    const double t_store_io = seconds_since(io_t0);
    const auto store_bytes =
        static_cast<std::uint64_t>(std::filesystem::file_size(store_path));

    for (double rate : cfg.rates) {
      const std::vector<std::size_t> forget = sample_forget_set(ds.n, rate, seed);
      const std::vector<std::size_t> remaining = complement_ids(ds.n, forget);

      const RemovalView view = restrict(art.schedule, forget);
      const Params init = init_params(spec, seed);
      const auto rt0 = SteadyClock::now();
      auto [w_ret, traj_ret] =
          retrain(spec, ds, view, tc, init, &art.rec.trajectory.provenance);
      const double t_retrain = seconds_since(rt0);
      (void)traj_ret;

      for (const std::string& method : cfg.methods) {
        ResultRow row;
        row.method = method;
        row.seed = seed;
        row.deletion_rate = rate;
        row.t_retrain_s = t_retrain;
        try {
          if (method == "hf") {
            ApproximatorStore store = art.rec.store;  // pristine copy per cell
            SensitivityEstimate sens;
            if (cfg.sensitivity == ExperimentConfig::SensitivityMode::oracle) {
              sens = sensitivity_oracle(w_ret, learned, store.sum_rows(forget));
            } else {
              const RegularityConstants consts = estimate_constants(
                  learned, ds, art.schedule, art.rec.trajectory.observed_max_grad,
                  cfg.train.clip_threshold);
              sens = sensitivity_bound(consts, tc.eta0, tc.decay,
                                       art.schedule.total_steps(),
                                       art.schedule.steps_per_epoch(),
                                       tc.batch_size, 1);
            }
            std::vector<UnlearnRequest> requests;
            requests.reserve(forget.size());
            long arrival = 0;
            for (std::size_t id : forget) {
              requests.push_back(UnlearnRequest{{id}, arrival++});
            }
            Rng noise_rng = Rng(seed).long_jumped(2);
            const std::vector<UnlearnResult> steps = unlearn_sequential(
                learned, store, requests, cfg.budget, sens, noise_rng);

            std::vector<double> times;
            times.reserve(steps.size());
            for (const auto& step : steps) {
              times.push_back(std::chrono::duration<double>(step.addition_time).count());
            }
            std::sort(times.begin(), times.end());
            row.t_unlearn_s = times[times.size() / 2];
            row.t_precompute_s = art.t_precompute;
            row.t_store_io_s = t_store_io;
            row.store_bytes = store_bytes;
            row.sigma = steps.back().sigma;
            row.speedup = t_retrain / *row.t_unlearn_s;
            row.distance = metric_distance(w_ret, steps.back().clean);
            const AccuracySuite acc =
                accuracy_suite(steps.back().noisy, test, ds, remaining, forget);
            row.acc_test = acc.acc_test;
            row.err_test = acc.err_test;
            row.err_remaining = acc.err_remaining;
            row.err_forget = acc.err_forget;
          } else if (method == "retrain") {
            row.t_unlearn_s = t_retrain;
            row.speedup = 1.0;
            row.distance = 0.0;
            row.sigma = 0.0;
            const AccuracySuite acc =
                accuracy_suite(w_ret, test, ds, remaining, forget);
            row.acc_test = acc.acc_test;
            row.err_test = acc.err_test;
            row.err_remaining = acc.err_remaining;
            row.err_forget = acc.err_forget;
          } else if (method == "ns" || method == "ij") {
            const auto all = ds.all_ids();
            const auto ht0 = SteadyClock::now();
            const Matrix hessian = full_hessian(learned, ds, all);
            row.t_precompute_s = seconds_since(ht0);
            (void)hessian;
            const auto ut0 = SteadyClock::now();
            const Params clean =
                method == "ns"
                    ? newton_step(learned, ds, forget, cfg.damping)
                    : infinitesimal_jackknife(learned, ds, forget, cfg.damping);
            row.t_unlearn_s = seconds_since(ut0);
            row.speedup = t_retrain / *row.t_unlearn_s;
            row.distance = metric_distance(w_ret, clean);
            const SensitivityEstimate sens =
                sensitivity_oracle(w_ret, learned, clean.theta - learned.theta);
            row.sigma = noise_sigma(sens.value, cfg.budget);
            Rng noise_rng = Rng(seed ^ 0xba5e11e5ULL).long_jumped(2);
            const Vector noise =
                gaussian_vector(noise_rng, *row.sigma, clean.theta.size());
            const Params noisy = make_params(spec, clean.theta + noise);
            const AccuracySuite acc =
                accuracy_suite(noisy, test, ds, remaining, forget);
            row.acc_test = acc.acc_test;
            row.err_test = acc.err_test;
            row.err_remaining = acc.err_remaining;
            row.err_forget = acc.err_forget;
          } else if (method == "finetune" || method == "neggrad") {
            TrainConfig mc = method == "finetune" ? cfg.finetune_cfg : cfg.neggrad_cfg;
            mc.seed = seed;
            const auto ut0 = SteadyClock::now();
            const Params clean = method == "finetune"
                                     ? finetune(learned, ds.subset(remaining), mc)
                                     : neggrad(learned, ds.subset(forget), mc);
            row.t_unlearn_s = seconds_since(ut0);
            row.speedup = t_retrain / *row.t_unlearn_s;
            row.distance = metric_distance(w_ret, clean);
            const AccuracySuite acc =
                accuracy_suite(clean, test, ds, remaining, forget);
            row.acc_test = acc.acc_test;
            row.err_test = acc.err_test;
            row.err_remaining = acc.err_remaining;
            row.err_forget = acc.err_forget;
          } else {
            throw ConfigError("apply: unknown method " + method);
          }
        } catch (const DivergenceError&) {
          row.status = "divergent";
        } catch (const std::exception&) {
          row.status = "error";
        }
        result.rows.push_back(std::move(row));
      }
    }
  }
  sort_rows(result.rows);
  return result;
}

AblationAxis ablation_axis_from_string(const std::string& name) {
  if (name == "step_size") return AblationAxis::step_size;
  if (name == "epochs") return AblationAxis::epochs;
  if (name == "decay") return AblationAxis::decay;
  if (name == "clipping") return AblationAxis::clipping;
  throw ConfigError("ablate: unknown axis '" + name +
                    "' (expected step_size|epochs|decay|clipping)");
}

ExperimentResult run_ablation(const ExperimentConfig& cfg, AblationAxis axis,
                              std::span<const double> values) {
  require(!values.empty(), "ablate: no axis values supplied");
  const Dataset ds = cfg.data.build_train();
  const ModelSpec spec = resolve_model(cfg, ds);

  ExperimentResult result;
  result.name = cfg.name + "_ablate";
  result.config_digest = cfg.digest();
  result.ablation = true;

  const std::string axis_name =
      axis == AblationAxis::step_size ? "step_size"
      : axis == AblationAxis::epochs  ? "epochs"
      : axis == AblationAxis::decay   ? "decay"
                                      : "clipping";

  for (double value : values) {
    ExperimentConfig point = cfg;
    switch (axis) {
      case AblationAxis::step_size:
        point.train.eta0 = value;
        break;
      case AblationAxis::epochs:
        point.train.epochs = static_cast<int>(std::llround(value));
        break;
      case AblationAxis::decay:
        point.train.decay = value;
        break;
      case AblationAxis::clipping:
        point.train.clip_threshold =
            value > 0.0 ? std::optional<double>(value) : std::nullopt;
        break;
    }
    for (uint64_t seed : cfg.seeds) {
      for (double rate : cfg.rates) {
        ResultRow row;
        row.axis = axis_name;
        row.axis_value = value;
        row.method = "hf";
        row.seed = seed;
        row.deletion_rate = rate;
        try {
          const SeedArtifacts art = learn_and_recollect(point, spec, ds, seed);
          const std::vector<std::size_t> forget =
              sample_forget_set(ds.n, rate, seed);
          TrainConfig tc = point.train;
          tc.seed = seed;
          const RemovalView view = restrict(art.schedule, forget);
          auto [w_ret, traj] = retrain(spec, ds, view, tc, init_params(spec, seed),
                                       &art.rec.trajectory.provenance);
          (void)traj;
          row.distance = metric_distance(
              w_ret, make_params(spec, art.rec.params.theta +
                                           art.rec.store.sum_rows(forget)));
        } catch (const DivergenceError&) {
          row.status = "divergent";
        } catch (const std::exception&) {
          row.status = "error";
        }
        result.rows.push_back(std::move(row));
      }
    }
  }
  sort_rows(result.rows);
  return result;
}

void write_csv(const ExperimentResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("csv: cannot write " + path.string());
  if (result.ablation) out << "axis,value,";
  out << "config_digest,status,method,seed,deletion_rate,distance,distance_min,"
         "distance_max,pearson,spearman,pearson_trial,spearman_trial,acc_test,"
         "err_test,err_remaining,err_forget,t_precompute_s,t_store_io_s,"
         "t_unlearn_s,t_retrain_s,speedup,store_bytes,sigma\n";
  const std::string digest = digest_hex(result.config_digest);
  for (const ResultRow& row : result.rows) {
    if (result.ablation) {
      out << row.axis << "," << fmt_opt(row.axis_value) << ",";
    }
    out << digest << "," << row.status << "," << row.method << "," << row.seed
        << "," << fmt(row.deletion_rate) << "," << fmt_opt(row.distance) << ","
        << fmt_opt(row.distance_min) << "," << fmt_opt(row.distance_max) << ","
        << fmt_opt(row.pearson_r) << "," << fmt_opt(row.spearman_r) << ","
        << fmt_opt(row.pearson_trial) << "," << fmt_opt(row.spearman_trial) << ","
        << fmt_opt(row.acc_test) << "," << fmt_opt(row.err_test) << ","
        << fmt_opt(row.err_remaining) << "," << fmt_opt(row.err_forget) << ","
        << fmt_opt(row.t_precompute_s) << "," << fmt_opt(row.t_store_io_s) << ","
        << fmt_opt(row.t_unlearn_s) << "," << fmt_opt(row.t_retrain_s) << ","
        << fmt_opt(row.speedup) << "," << fmt_opt(row.store_bytes) << ","
        << fmt_opt(row.sigma) << "\n";
  }
}

void write_manifest(const ExperimentConfig& cfg, const ExperimentResult& result,
                    const std::filesystem::path& path) {
  nlohmann::json j;
  j["experiment"] = result.name;
  j["config_digest"] = digest_hex(result.config_digest);
  j["dataset_digest"] = digest_hex(cfg.data.build_train().digest);
  j["seeds"] = cfg.seeds;
  j["rates"] = cfg.rates;
  j["methods"] = cfg.methods;
  j["rows"] = result.rows.size();
  if (!result.final_grad_norms.empty()) {
    nlohmann::json norms;
    for (const auto& [seed, norm] : result.final_grad_norms) {
      norms[std::to_string(seed)] = norm;
    }
    j["final_grad_norm"] = norms;
  }
  j["version"] = "hfu 0.1.0";
  j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." +
               std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  utsname host{};
  if (uname(&host) == 0) {
    j["host"] = {{"sysname", host.sysname},
                 {"release", host.release},
                 {"machine", host.machine}};
  }
  std::ofstream out(path);
  if (!out) throw IoError("manifest: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace hfu
