#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "wmcap/rng.hpp"

namespace wmcap {

// Fully-connected tanh classifier over a flat parameter vector. Layout per
// layer i: weight block (out x in, row-major) followed by the bias block.
struct Model {
  int input_dim = 0;
  std::vector<int> hidden;
  int classes = 0;
  std::uint64_t init_seed = 0;
  std::vector<double> params;

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
  int layer_in(int i) const;
  int layer_out(int i) const;
  std::size_t weight_offset(int layer) const;
  std::size_t bias_offset(int layer) const;
  std::size_t weight_count(int layer) const;
  std::size_t param_count() const;

  std::span<const double> layer_weights(int layer) const;
  std::span<double> layer_weights(int layer);
  std::span<const double> layer_bias(int layer) const;
  std::span<double> layer_bias(int layer);

  void forward(std::span<const double> x, std::vector<double>& logits) const;
  // argmax with ties broken toward the lowest class index
  int predict(std::span<const double> x) const;
};

Model make_mlp(int input_dim, std::vector<int> hidden, int classes,
               std::uint64_t seed);

// Dense additive deviation of a model's parameter vector.
struct ParamPerturbation {
  std::vector<double> values;
  double sigma = 0.0;
};

ParamPerturbation gaussian_perturbation(std::size_t count, double sigma,
                                        Rng& rng);

// Elementwise sum of parameters; the input model is left untouched.
Model perturb(const Model& m, const ParamPerturbation& mu);
Model perturb(const Model& m, std::span<const double> mu);

std::uint64_t param_hash(const Model& m);

void save_model_json(const Model& m, const std::filesystem::path& path);
Model load_model_json(const std::filesystem::path& path);

}  // namespace wmcap
