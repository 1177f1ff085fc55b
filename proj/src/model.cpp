#include "wmcap/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace wmcap {

int Model::layer_in(int i) const {
  return i == 0 ? input_dim : hidden[static_cast<std::size_t>(i) - 1];
}

int Model::layer_out(int i) const {
  return i == layer_count() - 1 ? classes : hidden[static_cast<std::size_t>(i)];
}

std::size_t Model::weight_offset(int layer) const {
  std::size_t off = 0;
  for (int i = 0; i < layer; ++i)
    off += static_cast<std::size_t>(layer_in(i)) * layer_out(i) + layer_out(i);
  return off;
}

std::size_t Model::bias_offset(int layer) const {
  return weight_offset(layer) +
         static_cast<std::size_t>(layer_in(layer)) * layer_out(layer);
}

std::size_t Model::weight_count(int layer) const {
  return static_cast<std::size_t>(layer_in(layer)) * layer_out(layer);
}

std::size_t Model::param_count() const {
  return weight_offset(layer_count());
}

std::span<const double> Model::layer_weights(int layer) const {
  return {params.data() + weight_offset(layer), weight_count(layer)};
}

std::span<double> Model::layer_weights(int layer) {
  return {params.data() + weight_offset(layer), weight_count(layer)};
}

std::span<const double> Model::layer_bias(int layer) const {
  return {params.data() + bias_offset(layer),
          static_cast<std::size_t>(layer_out(layer))};
}

std::span<double> Model::layer_bias(int layer) {
  return {params.data() + bias_offset(layer),
          static_cast<std::size_t>(layer_out(layer))};
}

void Model::forward(std::span<const double> x, std::vector<double>& logits) const {
  if (static_cast<int>(x.size()) != input_dim)
    throw std::invalid_argument("forward: input dimension mismatch");
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  for (int layer = 0; layer < layer_count(); ++layer) {
    const int n_in = layer_in(layer);
    const int n_out = layer_out(layer);
    const double* w = params.data() + weight_offset(layer);
    const double* b = params.data() + bias_offset(layer);
    next.assign(static_cast<std::size_t>(n_out), 0.0);
    for (int o = 0; o < n_out; ++o) {
      double acc = b[o];
      const double* wr = w + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) acc += wr[i] * cur[i];
      next[o] = (layer == layer_count() - 1) ? acc : std::tanh(acc);
    }
    cur.swap(next);
  }
  logits = std::move(cur);
}

int Model::predict(std::span<const double> x) const {
  std::vector<double> logits;
  forward(x, logits);
  int best = 0;
  for (int c = 1; c < classes; ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

Model make_mlp(int input_dim, std::vector<int> hidden, int classes,
               std::uint64_t seed) {
  if (input_dim < 1 || classes < 2)
    throw std::invalid_argument("make_mlp: bad dimensions");
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("make_mlp: bad hidden width");

  Model m;
  m.input_dim = input_dim;
  m.hidden = std::move(hidden);
  m.classes = classes;
  m.init_seed = seed;
  m.params.assign(m.param_count(), 0.0);

  Rng rng(seed);
  for (int layer = 0; layer < m.layer_count(); ++layer) {
    Rng lrng = rng.split(static_cast<std::uint64_t>(layer));
    const double scale = 1.0 / std::sqrt(static_cast<double>(m.layer_in(layer)));
    for (auto& w : m.layer_weights(layer)) w = scale * lrng.gaussian();
    // biases start at zero
  }
  return m;
}

ParamPerturbation gaussian_perturbation(std::size_t count, double sigma,
                                        Rng& rng) {
  if (sigma < 0) throw std::invalid_argument("perturbation sigma must be >= 0");
  ParamPerturbation p;
  p.sigma = sigma;
  p.values.resize(count);
  for (auto& v : p.values) v = sigma * rng.gaussian();
  return p;
}

Model perturb(const Model& m, std::span<const double> mu) {
  if (mu.size() != m.param_count())
    throw std::invalid_argument("perturb: dimension mismatch");
  Model out = m;
  for (std::size_t i = 0; i < mu.size(); ++i) out.params[i] += mu[i];
  return out;
}

Model perturb(const Model& m, const ParamPerturbation& mu) {
  return perturb(m, std::span<const double>(mu.values));
}

std::uint64_t param_hash(const Model& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(m.params.data(), m.params.size() * sizeof(double));
  return h;
}

void save_model_json(const Model& m, const std::filesystem::path& path) {
  nlohmann::json j;
  j["arch"] = {{"input_dim", m.input_dim},
               {"hidden", m.hidden},
               {"classes", m.classes},
               {"activation", "tanh"}};
  j["seed"] = m.init_seed;
  j["params"] = m.params;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

Model load_model_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  Model m;
  m.input_dim = j.at("arch").at("input_dim").get<int>();
  m.hidden = j.at("arch").at("hidden").get<std::vector<int>>();
  m.classes = j.at("arch").at("classes").get<int>();
  m.init_seed = j.at("seed").get<std::uint64_t>();
  m.params = j.at("params").get<std::vector<double>>();
  if (m.params.size() != m.param_count())
    throw std::runtime_error("model file parameter count mismatch");
  return m;
}

}  // namespace wmcap
