#include "hfu/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hfu {

std::vector<std::size_t> Dataset::all_ids() const {
  std::vector<std::size_t> ids(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

Dataset Dataset::subset(std::span<const std::size_t> ids) const {
  std::vector<Example> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    require(id < static_cast<std::size_t>(n), "Dataset::subset: unknown id");
    out.push_back(examples[id]);
  }
  return finalize_dataset(std::move(out), p, classes);
}

uint64_t dataset_digest(const Dataset& ds) {
  Fnv1a h;
  h.update_value(static_cast<uint64_t>(ds.n));
  h.update_value(static_cast<uint64_t>(ds.p));
  h.update_value(static_cast<uint64_t>(ds.classes));
  for (const Example& ex : ds.examples) {
    h.update_value(static_cast<uint64_t>(ex.id));
    h.update_value(static_cast<int64_t>(ex.label));
    h.update_doubles({ex.features.data(), static_cast<std::size_t>(ex.features.size())});
  }
  return h.digest();
}

Dataset finalize_dataset(std::vector<Example> examples, Index p, int classes) {
  Dataset ds;
  ds.examples = std::move(examples);
  ds.n = static_cast<Index>(ds.examples.size());
  ds.p = p;
  ds.classes = classes;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    Example& ex = ds.examples[i];
    ex.id = i;
    require(ex.features.size() == p, "dataset: feature dimension mismatch");
    require(ex.label >= 0 && ex.label < classes, "dataset: label out of range");
    check_finite(ex.features, "dataset features");
  }
  ds.digest = dataset_digest(ds);
  return ds;
}

Dataset make_synthetic(int classes, int per_class, int dim, double separation,
                       uint64_t seed) {
  require(classes >= 1 && per_class >= 1 && dim >= 1,
          "make_synthetic: counts must be >= 1");
  require(separation > 0.0, "make_synthetic: separation must be positive");
  require(classes <= dim, "make_synthetic: needs classes <= dim");

  // Means at scale*e_k are pairwise sqrt(2)*scale apart.
  const double scale = separation / std::sqrt(2.0);
  Rng rng(seed);
  std::vector<Example> examples;
  examples.reserve(static_cast<std::size_t>(classes) * per_class);
  for (int k = 0; k < classes; ++k) {
    for (int i = 0; i < per_class; ++i) {
      Example ex;
      ex.features = Vector::Zero(dim);
      for (int j = 0; j < dim; ++j) ex.features[j] = rng.next_normal();
      ex.features[k] += scale;
      ex.label = k;
      examples.push_back(std::move(ex));
    }
  }
  return finalize_dataset(std::move(examples), dim, classes);
}

namespace {

int resolve_column(const std::variant<std::string, int>& selector,
                   const std::vector<std::string>& header, bool has_header) {
  if (std::holds_alternative<int>(selector)) return std::get<int>(selector);
  require(has_header, "csv: column selected by name but file has no header");
  const std::string& name = std::get<std::string>(selector);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  throw ConfigError("csv: no column named '" + name + "'");
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open " + path.string());

  std::string line;
  std::vector<std::string> header;
  if (schema.has_header) {
    if (!std::getline(in, line)) throw IoError("csv: empty file " + path.string());
    header = split_row(line);
  }
  std::vector<int> feature_cols;
  feature_cols.reserve(schema.feature_columns.size());
  for (const auto& sel : schema.feature_columns) {
    feature_cols.push_back(resolve_column(sel, header, schema.has_header));
  }
  const int label_col = resolve_column(schema.label_column, header, schema.has_header);

  std::vector<Example> examples;
  int max_label = -1;
  long row = schema.has_header ? 1 : 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_row(line);
    Example ex;
    ex.features = Vector::Zero(static_cast<Index>(feature_cols.size()));
    auto parse_cell = [&](int col) -> double {
      if (col < 0 || col >= static_cast<int>(cells.size())) {
        throw IoError("csv: row " + std::to_string(row) + " has no column " +
                      std::to_string(col));
      }
      try {
        std::size_t pos = 0;
        const double v = std::stod(cells[static_cast<std::size_t>(col)], &pos);
        if (pos != cells[static_cast<std::size_t>(col)].size()) {
          throw std::invalid_argument("trailing characters");
        }
        return v;
      } catch (const std::exception&) {
        throw IoError("csv: non-numeric cell at row " + std::to_string(row) +
                      ", column " + std::to_string(col));
      }
    };
    for (std::size_t j = 0; j < feature_cols.size(); ++j) {
      ex.features[static_cast<Index>(j)] = parse_cell(feature_cols[j]);
    }
    const double label_value = parse_cell(label_col);
    ex.label = static_cast<int>(std::llround(label_value));
    if (ex.label != label_value) {
      throw IoError("csv: non-integer label at row " + std::to_string(row));
    }
    max_label = std::max(max_label, ex.label);
    examples.push_back(std::move(ex));
  }
  const int classes = schema.classes > 0 ? schema.classes : max_label + 1;
  for (const Example& ex : examples) {
    if (ex.label >= classes) {
      throw IoError("csv: label " + std::to_string(ex.label) +
                    " out of range for " + std::to_string(classes) + " classes");
    }
  }
  return finalize_dataset(std::move(examples), static_cast<Index>(feature_cols.size()),
                          classes);
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("csv: cannot write " + path.string());
  for (Index j = 0; j < ds.p; ++j) out << "f" << j << ",";
  out << "label\n";
  char buf[64];
  for (const Example& ex : ds.examples) {
    for (Index j = 0; j < ds.p; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ex.features[j]);
      out << buf << ",";
    }
    out << ex.label << "\n";
  }
}

namespace {

uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw IoError("idx: truncated file while reading " + what);
  return (static_cast<uint32_t>(bytes[0]) << 24) |
         (static_cast<uint32_t>(bytes[1]) << 16) |
         (static_cast<uint32_t>(bytes[2]) << 8) | static_cast<uint32_t>(bytes[3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw IoError("idx: cannot open " + images_path.string());
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw IoError("idx: cannot open " + labels_path.string());

  if (read_be32(images, "image magic") != 0x00000803u) {
    throw IoError("idx: bad image magic in " + images_path.string());
  }
  if (read_be32(labels, "label magic") != 0x00000801u) {
    throw IoError("idx: bad label magic in " + labels_path.string());
  }
  const uint32_t n_images = read_be32(images, "image count");
  const uint32_t rows = read_be32(images, "rows");
  const uint32_t cols = read_be32(images, "cols");
  const uint32_t n_labels = read_be32(labels, "label count");
  if (n_images != n_labels) {
    throw IoError("idx: image/label count mismatch (" + std::to_string(n_images) +
                  " vs " + std::to_string(n_labels) + ")");
  }
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  std::vector<Example> examples(n_images);
  std::vector<unsigned char> buf(pixels);
  int max_label = 0;
  for (uint32_t i = 0; i < n_images; ++i) {
    images.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    if (!images) throw IoError("idx: truncated image record " + std::to_string(i));
    char lbl = 0;
    labels.read(&lbl, 1);
    if (!labels) throw IoError("idx: truncated label record " + std::to_string(i));
    Example& ex = examples[i];
    ex.features = Vector::Zero(static_cast<Index>(pixels));
    for (std::size_t j = 0; j < pixels; ++j) {
      ex.features[static_cast<Index>(j)] = static_cast<double>(buf[j]) / 255.0;
    }
    ex.label = static_cast<unsigned char>(lbl);
    max_label = std::max(max_label, ex.label);
  }
  return finalize_dataset(std::move(examples), static_cast<Index>(pixels),
                          max_label + 1);
}

double BatchSchedule::step_size(int epoch, int batch) const {
  return step_size_at(static_cast<long>(epoch) * steps_per_epoch() + batch);
}

double BatchSchedule::step_size_at(long step) const {
  return eta0 * std::pow(decay, static_cast<double>(step));
}

uint64_t BatchSchedule::digest() const {
  Fnv1a h;
  h.update_value(static_cast<uint64_t>(n));
  h.update_value(static_cast<int64_t>(batch_size));
  h.update_value(static_cast<int64_t>(epochs));
  h.update_value(eta0);
  h.update_value(decay);
  h.update_value(seed);
  for (const auto& epoch : batches) {
    for (const auto& batch : epoch) {
      for (std::size_t id : batch) h.update_value(static_cast<uint64_t>(id));
      h.update_value(static_cast<uint64_t>(0xffffffffffffffffULL));
    }
  }
  return h.digest();
}

BatchSchedule build_schedule(Index n, int batch_size, int epochs, double eta0,
                             double decay, uint64_t seed) {
  require(n >= 1, "build_schedule: n must be >= 1");
  require(batch_size >= 1 && batch_size <= n,
          "build_schedule: need 1 <= batch_size <= n");
  require(epochs >= 0, "build_schedule: epochs must be >= 0");
  require(eta0 > 0.0, "build_schedule: eta0 must be positive");
  require(decay > 0.0 && decay <= 1.0, "build_schedule: decay must be in (0,1]");

  BatchSchedule schedule;
  schedule.n = n;
  schedule.batch_size = batch_size;
  schedule.epochs = epochs;
  schedule.eta0 = eta0;
  schedule.decay = decay;
  schedule.seed = seed;
  schedule.batches.resize(static_cast<std::size_t>(epochs));

  const Rng parent(seed);
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng epoch_rng = parent.jumped(static_cast<uint64_t>(e));
    epoch_rng.shuffle(order);
    auto& epoch_batches = schedule.batches[static_cast<std::size_t>(e)];
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      epoch_batches.emplace_back(order.begin() + static_cast<long>(start),
                                 order.begin() + static_cast<long>(stop));
    }
  }
  return schedule;
}

bool RemovalView::is_removed(std::size_t id) const {
  return std::binary_search(removed.begin(), removed.end(), id);
}

RemovalView restrict(const BatchSchedule& schedule,
                     std::span<const std::size_t> removed) {
  RemovalView view;
  view.base = &schedule;
  view.removed.assign(removed.begin(), removed.end());
  std::sort(view.removed.begin(), view.removed.end());
  view.removed.erase(std::unique(view.removed.begin(), view.removed.end()),
                     view.removed.end());
  for (std::size_t id : view.removed) {
    require(id < static_cast<std::size_t>(schedule.n), "restrict: unknown id");
  }
  return view;
}

}  // namespace hfu
