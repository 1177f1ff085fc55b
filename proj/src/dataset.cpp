#include "wmcap/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "wmcap/rng.hpp"

namespace wmcap {

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Adversary: return "adversary";
  }
  return "train";
}

Dataset synth_dataset(int classes, int feature_dim, int sample_count,
                      std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("synth_dataset: classes must be >= 2");
  if (feature_dim < 2) throw std::invalid_argument("synth_dataset: feature_dim must be >= 2");
  if (sample_count < classes)
    throw std::invalid_argument("synth_dataset: sample_count must be >= classes");

  Rng rng(seed);
  Rng mean_rng = rng.split(1);
  Rng noise_rng = rng.split(2);

  std::vector<double> means(static_cast<std::size_t>(classes) * feature_dim);
  for (auto& v : means) v = mean_rng.gaussian();

  constexpr double kClusterSigma = 1.0;

  Dataset ds;
  ds.feature_dim = feature_dim;
  ds.classes = classes;
  ds.labels.resize(sample_count);
  ds.features.resize(static_cast<std::size_t>(sample_count) * feature_dim);
  for (int i = 0; i < sample_count; ++i) {
    const int label = i % classes;  // class-balanced within one sample
    ds.labels[i] = label;
    const double* mu = means.data() + static_cast<std::size_t>(label) * feature_dim;
    double* row = ds.features.data() + static_cast<std::size_t>(i) * feature_dim;
    for (int j = 0; j < feature_dim; ++j)
      row[j] = mu[j] + kClusterSigma * noise_rng.gaussian();
  }
  return ds;
}

namespace {

Dataset take_rows(const Dataset& src, const std::vector<std::size_t>& rows,
                  Split split) {
  Dataset out;
  out.feature_dim = src.feature_dim;
  out.classes = src.classes;
  out.split = split;
  out.labels.reserve(rows.size());
  out.features.reserve(rows.size() * static_cast<std::size_t>(src.feature_dim));
  for (auto r : rows) {
    out.labels.push_back(src.labels[r]);
    auto row = src.row(r);
    out.features.insert(out.features.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace

DataSplits make_splits(const Dataset& full, double test_fraction,
                       double adversary_fraction, std::uint64_t seed) {
  if (full.size() == 0) throw std::invalid_argument("make_splits: empty dataset");
  if (test_fraction < 0 || test_fraction >= 1)
    throw std::invalid_argument("make_splits: test_fraction must be in [0,1)");
  if (adversary_fraction <= 0 || adversary_fraction > 1)
    throw std::invalid_argument("make_splits: adversary_fraction must be in (0,1]");

  std::vector<std::size_t> order(full.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(order, rng);

  const std::size_t n_test =
      static_cast<std::size_t>(test_fraction * static_cast<double>(full.size()));
  std::vector<std::size_t> test_rows(order.begin(), order.begin() + n_test);
  std::vector<std::size_t> train_rows(order.begin() + n_test, order.end());

  // The adversary holds a seeded slice of the training data, disjoint from
  // the test set; the owner still trains on all of it.
  const std::size_t n_adv = static_cast<std::size_t>(
      adversary_fraction * static_cast<double>(train_rows.size()));
  std::vector<std::size_t> adv_rows(train_rows.begin(),
                                    train_rows.begin() + std::max<std::size_t>(n_adv, 1));

  DataSplits out;
  out.train = take_rows(full, train_rows, Split::Train);
  out.test = take_rows(full, test_rows, Split::Test);
  out.adversary = take_rows(full, adv_rows, Split::Adversary);
  return out;
}

void save_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (int j = 0; j < ds.feature_dim; ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto row = ds.row(i);
    for (int j = 0; j < ds.feature_dim; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", row[j]);
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

Dataset load_dataset_csv(const std::filesystem::path& path, int classes) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty dataset file");

  int dim = 0;
  {
    std::stringstream header(line);
    std::string col;
    while (std::getline(header, col, ',')) {
      if (col == "label") break;
      if (col != "f" + std::to_string(dim))
        throw std::runtime_error("unexpected dataset header column: " + col);
      ++dim;
    }
  }
  if (dim < 2) throw std::runtime_error("dataset header has no feature columns");

  Dataset ds;
  ds.feature_dim = dim;
  ds.classes = classes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    for (int j = 0; j < dim; ++j) {
      if (!std::getline(row, cell, ','))
        throw std::runtime_error("short dataset row");
      ds.features.push_back(std::stod(cell));
    }
    if (!std::getline(row, cell, ',')) throw std::runtime_error("missing label");
    const int label = std::stoi(cell);
    if (label < 0 || label >= classes)
      throw std::runtime_error("label out of range in dataset file");
    ds.labels.push_back(label);
  }
  if (ds.labels.empty()) throw std::runtime_error("dataset file has no rows");
  return ds;
}

}  // namespace wmcap
