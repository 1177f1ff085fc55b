#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace wmcap {

enum class Split { Train, Test, Adversary };

std::string to_string(Split s);

// Row-major feature matrix with integer class labels.
struct Dataset {
  int feature_dim = 0;
  int classes = 0;
  std::vector<double> features;  // size() == labels.size() * feature_dim
  std::vector<int> labels;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * static_cast<std::size_t>(feature_dim),
            static_cast<std::size_t>(feature_dim)};
  }
};

// B well-separated Gaussian clusters with round-robin labels; class counts
// are balanced within one sample. Deterministic in (B, d, N, seed).
Dataset synth_dataset(int classes, int feature_dim, int sample_count,
                      std::uint64_t seed);

struct DataSplits {
  Dataset train;
  Dataset test;
  Dataset adversary;  // a seeded fraction of train, disjoint from test
};

DataSplits make_splits(const Dataset& full, double test_fraction,
                       double adversary_fraction, std::uint64_t seed);

// CSV with header f0..f{d-1},label
void save_dataset_csv(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset_csv(const std::filesystem::path& path, int classes);

}  // namespace wmcap
