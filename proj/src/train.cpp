#include "wmcap/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "wmcap/errors.hpp"

namespace wmcap {

namespace {

struct Workspace {
  std::vector<std::vector<double>> act;    // act[0] = input, act[l+1] = layer l output
  std::vector<std::vector<double>> delta;  // d(loss)/d(pre-activation), per layer
};

thread_local Workspace tls_ws;

void ensure_workspace(const Model& m, Workspace& ws) {
  const std::size_t layers = static_cast<std::size_t>(m.layer_count());
  ws.act.resize(layers + 1);
  ws.delta.resize(layers);
  ws.act[0].resize(static_cast<std::size_t>(m.input_dim));
  for (int l = 0; l < m.layer_count(); ++l) {
    ws.act[static_cast<std::size_t>(l) + 1].resize(
        static_cast<std::size_t>(m.layer_out(l)));
    ws.delta[static_cast<std::size_t>(l)].resize(
        static_cast<std::size_t>(m.layer_out(l)));
  }
}

}  // namespace

double softmax_ce_grad(const Model& m, std::span<const double> x, int label,
                       double weight, std::span<double> grad_params,
                       std::span<double> grad_input) {
  if (static_cast<int>(x.size()) != m.input_dim)
    throw std::invalid_argument("softmax_ce_grad: input dimension mismatch");
  if (label < 0 || label >= m.classes)
    throw std::invalid_argument("softmax_ce_grad: label out of range");
  if (!grad_params.empty() && grad_params.size() != m.param_count())
    throw std::invalid_argument("softmax_ce_grad: gradient buffer size mismatch");

  Workspace& ws = tls_ws;
  ensure_workspace(m, ws);
  std::copy(x.begin(), x.end(), ws.act[0].begin());

  const int layers = m.layer_count();
  for (int l = 0; l < layers; ++l) {
    const int n_in = m.layer_in(l);
    const int n_out = m.layer_out(l);
    const double* w = m.params.data() + m.weight_offset(l);
    const double* b = m.params.data() + m.bias_offset(l);
    const double* in = ws.act[static_cast<std::size_t>(l)].data();
    double* out = ws.act[static_cast<std::size_t>(l) + 1].data();
    for (int o = 0; o < n_out; ++o) {
      double acc = b[o];
      const double* wr = w + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) acc += wr[i] * in[i];
      out[o] = (l == layers - 1) ? acc : std::tanh(acc);
    }
  }

  const auto& logits = ws.act[static_cast<std::size_t>(layers)];
  double zmax = logits[0];
  for (double z : logits) zmax = std::max(zmax, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - zmax);
  const double logsum = zmax + std::log(sum);
  const double loss = logsum - logits[static_cast<std::size_t>(label)];

  if (grad_params.empty() && grad_input.empty()) return loss;

  auto& dout = ws.delta[static_cast<std::size_t>(layers) - 1];
  for (int c = 0; c < m.classes; ++c) {
    const double p = std::exp(logits[static_cast<std::size_t>(c)] - logsum);
    dout[static_cast<std::size_t>(c)] = p - (c == label ? 1.0 : 0.0);
  }

  for (int l = layers - 1; l >= 0; --l) {
    const int n_in = m.layer_in(l);
    const int n_out = m.layer_out(l);
    const double* w = m.params.data() + m.weight_offset(l);
    const double* in = ws.act[static_cast<std::size_t>(l)].data();
    const double* dz = ws.delta[static_cast<std::size_t>(l)].data();

    if (!grad_params.empty()) {
      double* gw = grad_params.data() + m.weight_offset(l);
      double* gb = grad_params.data() + m.bias_offset(l);
      for (int o = 0; o < n_out; ++o) {
        const double g = weight * dz[o];
        double* gwr = gw + static_cast<std::size_t>(o) * n_in;
        for (int i = 0; i < n_in; ++i) gwr[i] += g * in[i];
        gb[o] += g;
      }
    }

    const bool need_below = l > 0 || !grad_input.empty();
    if (!need_below) continue;
    std::vector<double>& dprev =
        l > 0 ? ws.delta[static_cast<std::size_t>(l) - 1] : ws.delta[0];
    std::vector<double> dinput;
    double* dst;
    std::size_t dst_n = static_cast<std::size_t>(n_in);
    if (l > 0) {
      dst = dprev.data();
    } else {
      dinput.resize(dst_n);
      dst = dinput.data();
    }
    for (int i = 0; i < n_in; ++i) {
      double acc = 0.0;
      for (int o = 0; o < n_out; ++o)
        acc += w[static_cast<std::size_t>(o) * n_in + i] * dz[o];
      dst[static_cast<std::size_t>(i)] = acc;
    }
    if (l > 0) {
      const double* a = ws.act[static_cast<std::size_t>(l)].data();
      for (int i = 0; i < n_in; ++i)
        dst[static_cast<std::size_t>(i)] *= (1.0 - a[i] * a[i]);  // tanh'
    } else if (!grad_input.empty()) {
      if (grad_input.size() != static_cast<std::size_t>(m.input_dim))
        throw std::invalid_argument("softmax_ce_grad: input gradient size mismatch");
      for (int i = 0; i < n_in; ++i)
        grad_input[static_cast<std::size_t>(i)] = weight * dst[static_cast<std::size_t>(i)];
    }
  }
  return loss;
}

TrainResult train(const Model& start, const Dataset& data,
                  const TrainConfig& cfg, const LossTerm& extra) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.feature_dim != start.input_dim)
    throw std::invalid_argument("train: dataset dimension mismatch");
  if (cfg.learning_rate <= 0)
    throw std::invalid_argument("train: learning_rate must be > 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (cfg.lambda < 0) throw std::invalid_argument("train: lambda must be >= 0");

  TrainResult result;
  result.model = start;
  Model& m = result.model;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> grad(m.param_count());
  std::vector<double> extra_grad(extra ? m.param_count() : 0);

  Rng base(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = base.split(static_cast<std::uint64_t>(epoch));
    shuffle(order, erng);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), pos + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - pos);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = pos; k < end; ++k) {
        const std::size_t i = order[k];
        batch_loss += inv * softmax_ce_grad(m, data.row(i), data.labels[i], inv, grad);
      }
      if (extra && cfg.lambda > 0) {
        std::fill(extra_grad.begin(), extra_grad.end(), 0.0);
        batch_loss += cfg.lambda * extra(m, extra_grad);
        for (std::size_t i = 0; i < grad.size(); ++i)
          grad[i] += cfg.lambda * extra_grad[i];
      }
      if (!std::isfinite(batch_loss))
        throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch),
                            epoch);
      for (std::size_t i = 0; i < grad.size(); ++i)
        m.params[i] -= cfg.learning_rate * grad[i];
      epoch_loss += batch_loss;
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    if (!std::isfinite(epoch_loss))
      throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch),
                          epoch);
    result.loss_history.push_back(epoch_loss);
  }
  return result;
}

double accuracy(const Model& m, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  if (data.feature_dim != m.input_dim)
    throw std::invalid_argument("accuracy: dataset dimension mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (m.predict(data.row(i)) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

LossTerm data_loss_term(const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("data_loss_term: empty dataset");
  Dataset copy = data;
  return [copy = std::move(copy)](const Model& m, std::span<double> grad) {
    const double inv = 1.0 / static_cast<double>(copy.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < copy.size(); ++i)
      loss += inv * softmax_ce_grad(m, copy.row(i), copy.labels[i], inv, grad);
    return loss;
  };
}

double grad_check(const Model& m, const LossTerm& loss, int probes, double step,
                  std::uint64_t seed) {
  if (!loss) throw std::invalid_argument("grad_check: empty loss term");
  std::vector<double> analytic(m.param_count(), 0.0);
  loss(m, analytic);

  Rng rng(seed);
  const std::size_t n = m.param_count();
  std::vector<std::size_t> coords;
  if (static_cast<std::size_t>(probes) >= n) {
    coords.resize(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  } else {
    coords.reserve(static_cast<std::size_t>(probes));
    for (int k = 0; k < probes; ++k)
      coords.push_back(static_cast<std::size_t>(rng.uniform_int(n)));
  }

  std::vector<double> scratch;  // unused gradient sink
  Model probe = m;
  double worst = 0.0;
  for (auto c : coords) {
    const double saved = probe.params[c];
    probe.params[c] = saved + step;
    const double up = loss(probe, {});
    probe.params[c] = saved - step;
    const double down = loss(probe, {});
    probe.params[c] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(analytic[c]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
  }
  return worst;
}

}  // namespace wmcap
