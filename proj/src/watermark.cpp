#include "wmcap/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "wmcap/channel_math.hpp"
#include "wmcap/errors.hpp"

namespace wmcap {

std::string to_string(SchemeKind k) {
  return k == SchemeKind::WhiteBox ? "white_box" : "black_box";
}

SchemeKind scheme_from_string(const std::string& s) {
  if (s == "white_box") return SchemeKind::WhiteBox;
  if (s == "black_box") return SchemeKind::BlackBox;
  throw std::invalid_argument("unknown scheme kind: " + s);
}

SchemeKind kind_of(const OwnershipKey& key) {
  return std::holds_alternative<WhiteBoxKey>(key) ? SchemeKind::WhiteBox
                                                  : SchemeKind::BlackBox;
}

int message_length(const OwnershipKey& key) {
  return std::visit([](const auto& k) { return k.length; }, key);
}

std::vector<double> regen_projection(int length, int proj_dim,
                                     std::uint64_t seed) {
  std::vector<double> x(static_cast<std::size_t>(length) * proj_dim);
  Rng rng = Rng(seed).split(0x58u);
  for (auto& v : x) v = rng.gaussian();
  return x;
}

OwnershipKey keygen_white_box(int length, const Model& model,
                              std::uint64_t seed, int target_layer) {
  if (length < 1) throw std::invalid_argument("keygen: length must be >= 1");
  if (target_layer < 0 || target_layer >= model.layer_count())
    throw std::invalid_argument("keygen: target layer out of range");
  const int proj_dim = static_cast<int>(model.weight_count(target_layer));
  if (length > proj_dim)
    throw std::invalid_argument(
        "keygen: message longer than the target layer can carry at zero BER");
  WhiteBoxKey key;
  key.length = length;
  key.target_layer = target_layer;
  key.proj_dim = proj_dim;
  key.seed = seed;
  key.projection = regen_projection(length, proj_dim, seed);
  key.bias.assign(static_cast<std::size_t>(length), 0.0);
  return key;
}

OwnershipKey keygen_black_box(int length, int classes, int input_dim,
                              std::uint64_t seed, double box_lo, double box_hi) {
  if (length < 1) throw std::invalid_argument("keygen: length must be >= 1");
  if (classes < 2) throw std::invalid_argument("keygen: classes must be >= 2");
  if (input_dim < 1) throw std::invalid_argument("keygen: bad input dimension");
  if (!(box_lo < box_hi)) throw std::invalid_argument("keygen: bad trigger box");

  BlackBoxKey key;
  key.length = length;
  key.classes = classes;
  key.bits_per_trigger = static_cast<int>(std::floor(std::log2(classes)));
  if (key.bits_per_trigger < 1)
    throw std::invalid_argument("keygen: floor(log2 classes) must be >= 1");
  key.trigger_count = (length + key.bits_per_trigger - 1) / key.bits_per_trigger;
  key.input_dim = input_dim;
  key.box_lo = box_lo;
  key.box_hi = box_hi;
  key.seed = seed;
  key.triggers.resize(static_cast<std::size_t>(key.trigger_count) * input_dim);
  Rng rng = Rng(seed).split(0x7au);
  for (auto& v : key.triggers) v = rng.uniform(box_lo, box_hi);
  return key;
}

std::vector<std::uint8_t> interpret_class(int cls, int classes) {
  if (classes < 2) throw std::invalid_argument("interpret: classes must be >= 2");
  if (cls < 0 || cls >= classes)
    throw std::invalid_argument("interpret: class out of range");
  const int bits = static_cast<int>(std::floor(std::log2(classes)));
  const int clamped = std::min(cls, (1 << bits) - 1);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(bits));
  for (int k = 0; k < bits; ++k)
    out[static_cast<std::size_t>(k)] =
        static_cast<std::uint8_t>((clamped >> (bits - 1 - k)) & 1);
  return out;
}

int class_from_bits(std::span<const std::uint8_t> bits, int classes) {
  const int nbits = static_cast<int>(std::floor(std::log2(classes)));
  if (static_cast<int>(bits.size()) != nbits)
    throw std::invalid_argument("interpret: bit-group size mismatch");
  int v = 0;
  for (auto b : bits) {
    if (b > 1) throw std::invalid_argument("interpret: bits must be 0 or 1");
    v = (v << 1) | b;
  }
  return v;
}

std::vector<int> trigger_labels(const BlackBoxKey& key,
                                const IdentityMessage& m) {
  if (static_cast<int>(m.length()) != key.length)
    throw std::invalid_argument("trigger_labels: message length mismatch");
  std::vector<std::uint8_t> padded = m.bits;
  padded.resize(static_cast<std::size_t>(key.trigger_count) * key.bits_per_trigger, 0);
  std::vector<int> labels(static_cast<std::size_t>(key.trigger_count));
  for (int t = 0; t < key.trigger_count; ++t) {
    std::span<const std::uint8_t> group(
        padded.data() + static_cast<std::size_t>(t) * key.bits_per_trigger,
        static_cast<std::size_t>(key.bits_per_trigger));
    labels[static_cast<std::size_t>(t)] = class_from_bits(group, key.classes);
  }
  return labels;
}

namespace {

void check_key_model(const WhiteBoxKey& key, const Model& model) {
  if (key.target_layer < 0 || key.target_layer >= model.layer_count() ||
      static_cast<std::size_t>(key.proj_dim) != model.weight_count(key.target_layer))
    throw std::invalid_argument("white-box key does not match the model");
}

void check_key_model(const BlackBoxKey& key, const Model& model) {
  if (key.input_dim != model.input_dim || key.classes != model.classes)
    throw std::invalid_argument("black-box key does not match the model");
}

// sigmoid(X.W + b) scores for every message bit
std::vector<double> projection_scores(const Model& model, const WhiteBoxKey& key) {
  check_key_model(key, model);
  auto w = model.layer_weights(key.target_layer);
  std::vector<double> scores(static_cast<std::size_t>(key.length));
  for (int i = 0; i < key.length; ++i) {
    const double* row =
        key.projection.data() + static_cast<std::size_t>(i) * key.proj_dim;
    double acc = key.bias[static_cast<std::size_t>(i)];
    for (int j = 0; j < key.proj_dim; ++j) acc += row[j] * w[static_cast<std::size_t>(j)];
    scores[static_cast<std::size_t>(i)] = acc;
  }
  return scores;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// numerically stable per-bit binary cross-entropy at logit z
double bce_logit(double z, double bit) {
  // log(1 + e^z) - bit*z, rearranged to avoid overflow
  const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  return softplus - bit * z;
}

double white_box_loss_grad(const Model& model, const WhiteBoxKey& key,
                           const IdentityMessage& m,
                           std::span<double> grad_params) {
  if (static_cast<int>(m.length()) != key.length)
    throw std::invalid_argument("wm_loss: message length mismatch");
  const auto scores = projection_scores(model, key);
  const double inv = 1.0 / static_cast<double>(key.length);
  double loss = 0.0;
  for (int i = 0; i < key.length; ++i)
    loss += inv * bce_logit(scores[static_cast<std::size_t>(i)],
                            static_cast<double>(m.bits[static_cast<std::size_t>(i)]));
  if (!grad_params.empty()) {
    if (grad_params.size() != model.param_count())
      throw std::invalid_argument("wm_loss: gradient buffer size mismatch");
    double* gw = grad_params.data() + model.weight_offset(key.target_layer);
    for (int i = 0; i < key.length; ++i) {
      const double d =
          inv * (sigmoid(scores[static_cast<std::size_t>(i)]) -
                 static_cast<double>(m.bits[static_cast<std::size_t>(i)]));
      const double* row =
          key.projection.data() + static_cast<std::size_t>(i) * key.proj_dim;
      for (int j = 0; j < key.proj_dim; ++j) gw[j] += d * row[j];
    }
  }
  return loss;
}

double black_box_loss_grad(const Model& model, const BlackBoxKey& key,
                           const IdentityMessage& m,
                           std::span<double> grad_params) {
  check_key_model(key, model);
  const auto labels = trigger_labels(key, m);
  const double inv = 1.0 / static_cast<double>(key.trigger_count);
  double loss = 0.0;
  for (int t = 0; t < key.trigger_count; ++t) {
    std::span<const double> x(
        key.triggers.data() + static_cast<std::size_t>(t) * key.input_dim,
        static_cast<std::size_t>(key.input_dim));
    loss += inv * softmax_ce_grad(model, x, labels[static_cast<std::size_t>(t)],
                                  inv, grad_params);
  }
  return loss;
}

}  // namespace

double wm_loss(const Model& model, const OwnershipKey& key,
               const IdentityMessage& m) {
  return std::visit(
      [&](const auto& k) -> double {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, WhiteBoxKey>)
          return white_box_loss_grad(model, k, m, {});
        else
          return black_box_loss_grad(model, k, m, {});
      },
      key);
}

LossTerm wm_loss_term(const OwnershipKey& key, const IdentityMessage& m) {
  return [key, m](const Model& model, std::span<double> grad) -> double {
    return std::visit(
        [&](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, WhiteBoxKey>)
            return white_box_loss_grad(model, k, m, grad);
          else
            return black_box_loss_grad(model, k, m, grad);
        },
        key);
  };
}

IdentityMessage verify(const Model& model, const OwnershipKey& key) {
  IdentityMessage out;
  if (const auto* wb = std::get_if<WhiteBoxKey>(&key)) {
    const auto scores = projection_scores(model, *wb);
    out.bits.resize(static_cast<std::size_t>(wb->length));
    for (int i = 0; i < wb->length; ++i)
      out.bits[static_cast<std::size_t>(i)] =
          scores[static_cast<std::size_t>(i)] > 0.0 ? 1 : 0;
    return out;
  }
  const auto& bb = std::get<BlackBoxKey>(key);
  check_key_model(bb, model);
  out.bits.reserve(static_cast<std::size_t>(bb.trigger_count) * bb.bits_per_trigger);
  for (int t = 0; t < bb.trigger_count; ++t) {
    std::span<const double> x(
        bb.triggers.data() + static_cast<std::size_t>(t) * bb.input_dim,
        static_cast<std::size_t>(bb.input_dim));
    const auto bits = interpret_class(model.predict(x), bb.classes);
    out.bits.insert(out.bits.end(), bits.begin(), bits.end());
  }
  out.bits.resize(static_cast<std::size_t>(bb.length));  // drop tail padding
  return out;
}

EmbedResult embed(const Model& clean, const OwnershipKey& key,
                  const IdentityMessage& m, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& cfg) {
  if (cfg.lambda < 0) throw std::invalid_argument("embed: lambda must be >= 0");
  if (static_cast<int>(m.length()) != message_length(key))
    throw std::invalid_argument("embed: message length mismatch");

  const double clean_acc = accuracy(clean, test_set);
  const LossTerm reg = wm_loss_term(key, m);

  EmbedResult result;
  result.model = clean;
  TrainConfig step_cfg = cfg;
  step_cfg.epochs = 1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    step_cfg.seed = Rng(cfg.seed).split(static_cast<std::uint64_t>(epoch)).base_seed();
    result.model = train(result.model, train_set, step_cfg, reg).model;
    result.ber_history.push_back(ber(m, verify(result.model, key)));
  }
  result.final_ber = result.ber_history.empty()
                         ? ber(m, verify(result.model, key))
                         : result.ber_history.back();
  result.fidelity = clean_acc - accuracy(result.model, test_set);
  if (result.final_ber != 0.0)
    throw EmbeddingError("embed: message not embedded after " +
                             std::to_string(cfg.epochs) +
                             " epochs, BER=" + std::to_string(result.final_ber),
                         result.final_ber);
  return result;
}

std::size_t key_perturb_dim(const OwnershipKey& key) {
  if (const auto* wb = std::get_if<WhiteBoxKey>(&key))
    return wb->projection.size();
  return std::get<BlackBoxKey>(key).triggers.size();
}

OwnershipKey perturb_key(const OwnershipKey& key, std::span<const double> kappa) {
  if (kappa.size() != key_perturb_dim(key))
    throw std::invalid_argument("perturb_key: dimension mismatch");
  OwnershipKey out = key;
  if (auto* wb = std::get_if<WhiteBoxKey>(&out)) {
    for (std::size_t i = 0; i < kappa.size(); ++i) wb->projection[i] += kappa[i];
    return out;
  }
  auto& bb = std::get<BlackBoxKey>(out);
  for (std::size_t i = 0; i < kappa.size(); ++i)
    bb.triggers[i] = std::clamp(bb.triggers[i] + kappa[i], bb.box_lo, bb.box_hi);
  return out;
}

double wm_loss_key_grad(const Model& model, const OwnershipKey& key,
                        const IdentityMessage& m, std::span<double> grad_kappa) {
  if (grad_kappa.size() != key_perturb_dim(key))
    throw std::invalid_argument("wm_loss_key_grad: gradient size mismatch");

  if (const auto* wb = std::get_if<WhiteBoxKey>(&key)) {
    const auto scores = projection_scores(model, *wb);
    auto w = model.layer_weights(wb->target_layer);
    const double inv = 1.0 / static_cast<double>(wb->length);
    double loss = 0.0;
    for (int i = 0; i < wb->length; ++i) {
      const double z = scores[static_cast<std::size_t>(i)];
      const double bit = static_cast<double>(m.bits[static_cast<std::size_t>(i)]);
      loss += inv * bce_logit(z, bit);
      const double d = inv * (sigmoid(z) - bit);
      double* g = grad_kappa.data() + static_cast<std::size_t>(i) * wb->proj_dim;
      for (int j = 0; j < wb->proj_dim; ++j) g[j] += d * w[static_cast<std::size_t>(j)];
    }
    return loss;
  }

  const auto& bb = std::get<BlackBoxKey>(key);
  check_key_model(bb, model);
  const auto labels = trigger_labels(bb, m);
  const double inv = 1.0 / static_cast<double>(bb.trigger_count);
  double loss = 0.0;
  std::vector<double> input_grad(static_cast<std::size_t>(bb.input_dim));
  for (int t = 0; t < bb.trigger_count; ++t) {
    std::span<const double> x(
        bb.triggers.data() + static_cast<std::size_t>(t) * bb.input_dim,
        static_cast<std::size_t>(bb.input_dim));
    loss += inv * softmax_ce_grad(model, x, labels[static_cast<std::size_t>(t)],
                                  inv, {}, input_grad);
    double* g = grad_kappa.data() + static_cast<std::size_t>(t) * bb.input_dim;
    for (int j = 0; j < bb.input_dim; ++j) g[j] += input_grad[static_cast<std::size_t>(j)];
  }
  return loss;
}

void save_key_json(const OwnershipKey& key, const std::filesystem::path& path) {
  nlohmann::json j;
  if (const auto* wb = std::get_if<WhiteBoxKey>(&key)) {
    j["kind"] = "white_box";
    j["length"] = wb->length;
    j["target_layer"] = wb->target_layer;
    j["proj_dim"] = wb->proj_dim;
    j["seed"] = wb->seed;
  } else {
    const auto& bb = std::get<BlackBoxKey>(key);
    j["kind"] = "black_box";
    j["length"] = bb.length;
    j["classes"] = bb.classes;
    j["input_dim"] = bb.input_dim;
    j["box_lo"] = bb.box_lo;
    j["box_hi"] = bb.box_hi;
    j["seed"] = bb.seed;
    j["triggers"] = bb.triggers;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

OwnershipKey load_key_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "white_box") {
    WhiteBoxKey key;
    key.length = j.at("length").get<int>();
    key.target_layer = j.at("target_layer").get<int>();
    key.proj_dim = j.at("proj_dim").get<int>();
    key.seed = j.at("seed").get<std::uint64_t>();
    key.projection = regen_projection(key.length, key.proj_dim, key.seed);
    key.bias.assign(static_cast<std::size_t>(key.length), 0.0);
    return key;
  }
  if (kind != "black_box") throw std::runtime_error("unknown key kind: " + kind);
  BlackBoxKey key;
  key.length = j.at("length").get<int>();
  key.classes = j.at("classes").get<int>();
  key.bits_per_trigger = static_cast<int>(std::floor(std::log2(key.classes)));
  key.trigger_count = (key.length + key.bits_per_trigger - 1) / key.bits_per_trigger;
  key.input_dim = j.at("input_dim").get<int>();
  key.box_lo = j.at("box_lo").get<double>();
  key.box_hi = j.at("box_hi").get<double>();
  key.seed = j.at("seed").get<std::uint64_t>();
  key.triggers = j.at("triggers").get<std::vector<double>>();
  if (key.triggers.size() !=
      static_cast<std::size_t>(key.trigger_count) * key.input_dim)
    throw std::runtime_error("key file trigger matrix size mismatch");
  return key;
}

}  // namespace wmcap
