#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "wmcap/dataset.hpp"
#include "wmcap/model.hpp"

namespace wmcap {

struct TrainConfig {
  double learning_rate = 0.05;
  int batch_size = 32;
  int epochs = 30;
  double lambda = 0.0;  // weight of the extra loss term
  std::uint64_t seed = 0;
};

// Scalar loss over the model; implementations accumulate d(loss)/d(params)
// into the provided buffer (same length as model.params).
using LossTerm = std::function<double(const Model&, std::span<double>)>;

struct TrainResult {
  Model model;
  std::vector<double> loss_history;  // per-epoch mean of the optimized loss
};

// Mini-batch SGD on softmax cross-entropy plus cfg.lambda * extra.
// Batch order is a seeded shuffle per epoch; reductions are sequential, so
// the trajectory is bit-reproducible for a fixed (seed, config).
TrainResult train(const Model& start, const Dataset& data,
                  const TrainConfig& cfg, const LossTerm& extra = {});

double accuracy(const Model& m, const Dataset& data);

// Mean softmax cross-entropy over a dataset, as a LossTerm.
LossTerm data_loss_term(const Dataset& data);

// Max relative error between analytic and central-difference gradients,
// probed on `probes` random parameter coordinates.
double grad_check(const Model& m, const LossTerm& loss, int probes = 120,
                  double step = 1e-4, std::uint64_t seed = 0);

// Softmax cross-entropy of one sample; adds `weight` * gradient into
// grad_params, and writes d(loss)/d(input) when grad_input is non-empty.
double softmax_ce_grad(const Model& m, std::span<const double> x, int label,
                       double weight, std::span<double> grad_params,
                       std::span<double> grad_input = {});

}  // namespace wmcap
