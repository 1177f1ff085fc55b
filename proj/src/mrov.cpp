#include "wmcap/mrov.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "json.hpp"
#include "wmcap/channel_math.hpp"
#include "wmcap/errors.hpp"

namespace wmcap {

IdentityMessage majority_vote(const std::vector<IdentityMessage>& rounds) {
  if (rounds.empty()) throw std::invalid_argument("majority_vote: no rounds");
  const std::size_t length = rounds.front().length();
  std::vector<int> ones(length, 0);
  for (const auto& r : rounds) {
    if (r.length() != length)
      throw std::invalid_argument("majority_vote: round length mismatch");
    for (std::size_t i = 0; i < length; ++i) ones[i] += r.bits[i];
  }
  IdentityMessage out;
  out.bits.resize(length);
  const int votes = static_cast<int>(rounds.size());
  for (std::size_t i = 0; i < length; ++i)
    out.bits[i] = 2 * ones[i] > votes ? 1 : 0;  // even ties resolve to 0
  return out;
}

IdentityMessage mrov_verify_params(const Model& model, const OwnershipKey& key,
                                   const PerturbSpec& spec) {
  if (spec.sigma <= 0) throw std::invalid_argument("mrov: sigma must be > 0");
  if (spec.rounds < 1) throw std::invalid_argument("mrov: rounds must be >= 1");
  std::vector<IdentityMessage> rounds;
  rounds.reserve(static_cast<std::size_t>(spec.rounds));
  Rng base(spec.seed);
  for (int r = 0; r < spec.rounds; ++r) {
    Rng rng = base.split(static_cast<std::uint64_t>(r));
    const auto mu = gaussian_perturbation(model.param_count(), spec.sigma, rng);
    rounds.push_back(verify(perturb(model, mu), key));
  }
  return majority_vote(rounds);
}

LossTerm robust_param_loss_term(const OwnershipKey& key,
                                const IdentityMessage& m,
                                const PerturbSpec& spec, bool resample) {
  if (spec.sigma <= 0) throw std::invalid_argument("mrov: sigma must be > 0");
  if (spec.reg_samples < 1)
    throw std::invalid_argument("mrov: reg_samples must be >= 1");
  auto counter = std::make_shared<std::uint64_t>(0);
  const LossTerm inner = wm_loss_term(key, m);
  return [key, m, spec, resample, counter, inner](
             const Model& model, std::span<double> grad) -> double {
    const std::uint64_t draw = resample ? (*counter)++ : 0;
    Rng base = Rng(spec.seed).split(0xeb0u + draw);
    const double inv = 1.0 / static_cast<double>(spec.reg_samples);
    double loss = 0.0;
    std::vector<double> pgrad(grad.empty() ? 0 : model.param_count());
    for (int p = 0; p < spec.reg_samples; ++p) {
      Rng rng = base.split(static_cast<std::uint64_t>(p));
      const auto mu = gaussian_perturbation(model.param_count(), spec.sigma, rng);
      const Model shifted = perturb(model, mu);
      if (grad.empty()) {
        loss += inv * inner(shifted, {});
      } else {
        std::fill(pgrad.begin(), pgrad.end(), 0.0);
        loss += inv * inner(shifted, pgrad);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += inv * pgrad[i];
      }
    }
    return loss;
  };
}

EmbedResult embed_robust_params(const Model& clean, const OwnershipKey& key,
                                const IdentityMessage& m,
                                const Dataset& train_set,
                                const Dataset& test_set,
                                const PerturbSpec& spec,
                                const TrainConfig& cfg) {
  const double clean_acc = accuracy(clean, test_set);
  const LossTerm reg = robust_param_loss_term(key, m, spec, true);

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
    throw EmbeddingError("embed_robust_params: message not embedded, BER=" +
                             std::to_string(result.final_ber),
                         result.final_ber);
  return result;
}

std::optional<std::vector<double>> match_key_perturbation(
    const Model& model, const OwnershipKey& key, const IdentityMessage& m,
    std::span<const double> mu, const MatchOptions& opts,
    std::span<const double> init) {
  if (opts.tolerance <= 0) throw std::invalid_argument("match: bad tolerance");
  if (opts.max_iters < 1) throw std::invalid_argument("match: bad iteration cap");

  const double target = wm_loss(perturb(model, mu), key, m);
  const std::size_t dim = key_perturb_dim(key);
  if (!init.empty() && init.size() != dim)
    throw std::invalid_argument("match: init dimension mismatch");
  std::vector<double> kappa(dim, 0.0);
  std::vector<double> grad(dim);
  std::vector<double> trial(dim);

  auto loss_at = [&](const std::vector<double>& k) {
    return wm_loss(model, perturb_key(key, k), m);
  };

  double loss = loss_at(kappa);
  double gap = loss - target;
  if (std::abs(gap) <= opts.tolerance) return kappa;
  if (!init.empty()) kappa.assign(init.begin(), init.end());

  double eta = 1.0;
  for (int it = 0; it < opts.max_iters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    loss = wm_loss_key_grad(model, perturb_key(key, kappa), m, grad);
    gap = loss - target;
    if (std::abs(gap) <= opts.tolerance) return kappa;

    const double obj = gap * gap;
    bool moved = false;
    for (int bt = 0; bt < 40; ++bt) {
      for (std::size_t i = 0; i < dim; ++i)
        trial[i] = kappa[i] - eta * 2.0 * gap * grad[i];
      const double tgap = loss_at(trial) - target;
      if (tgap * tgap < obj) {
        kappa.swap(trial);
        eta *= 1.5;
        moved = true;
        break;
      }
      eta *= 0.5;
      if (eta < 1e-18) break;
    }
    if (!moved) return std::nullopt;
  }
  gap = loss_at(kappa) - target;
  if (std::abs(gap) <= opts.tolerance) return kappa;
  return std::nullopt;
}

MatchResult build_matched_pairs(const Model& model, const OwnershipKey& key,
                                const IdentityMessage& m,
                                const PerturbSpec& spec,
                                const MatchOptions& opts) {
  if (spec.gen_samples < 1)
    throw std::invalid_argument("build_matched_pairs: gen_samples must be >= 1");
  MatchResult result;
  result.pairs.reserve(static_cast<std::size_t>(spec.gen_samples));
  const std::size_t dim = key_perturb_dim(key);
  Rng base = Rng(spec.seed).split(0x3a7u);

  // The first pair starts at zero; its solution norm sets the scale for
  // randomized starts, which spread later pairs over the loss level sets
  // instead of collecting them all on one gradient ray.
  double init_scale = 0.0;
  std::vector<double> init;
  for (int q = 0; q < spec.gen_samples; ++q) {
    Rng rng = base.split(static_cast<std::uint64_t>(q));
    auto mu = gaussian_perturbation(model.param_count(), spec.sigma, rng);
    init.clear();
    if (q > 0 && init_scale > 0.0) {
      init.resize(dim);
      Rng irng = base.split(0x900000u + static_cast<std::uint64_t>(q));
      const double per_coord = init_scale / std::sqrt(static_cast<double>(dim));
      for (auto& v : init) v = per_coord * irng.gaussian();
    }
    auto kappa = match_key_perturbation(model, key, m, mu.values, opts, init);
    if (!kappa) {
      ++result.dropped;
      continue;
    }
    if (result.pairs.empty()) {
      double n2 = 0.0;
      for (double v : *kappa) n2 += v * v;
      init_scale = 0.5 * std::sqrt(n2);
    }
    const double target = wm_loss(perturb(model, mu), key, m);
    const double got = wm_loss(model, perturb_key(key, *kappa), m);
    result.pairs.push_back(
        MatchedPair{std::move(mu.values), std::move(*kappa), std::abs(got - target)});
  }
  return result;
}

namespace {

// raw decoder output, in whitened units
std::vector<double> decode_whitened(const KeyPerturbGenerator& g,
                                    std::span<const double> z) {
  if (static_cast<int>(z.size()) != g.latent_dim)
    throw std::invalid_argument("generator: latent dimension mismatch");
  std::vector<double> h(static_cast<std::size_t>(g.hidden_dim));
  for (int o = 0; o < g.hidden_dim; ++o) {
    double acc = g.b1[static_cast<std::size_t>(o)];
    const double* row = g.w1.data() + static_cast<std::size_t>(o) * g.latent_dim;
    for (int i = 0; i < g.latent_dim; ++i)
      acc += row[i] * z[static_cast<std::size_t>(i)];
    h[static_cast<std::size_t>(o)] = std::tanh(acc);
  }
  std::vector<double> out(static_cast<std::size_t>(g.out_dim));
  for (int o = 0; o < g.out_dim; ++o) {
    double acc = g.b2[static_cast<std::size_t>(o)];
    const double* row = g.w2.data() + static_cast<std::size_t>(o) * g.hidden_dim;
    for (int i = 0; i < g.hidden_dim; ++i)
      acc += row[i] * h[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

}  // namespace

std::vector<double> KeyPerturbGenerator::decode(std::span<const double> z) const {
  std::vector<double> out = decode_whitened(*this, z);
  for (int i = 0; i < out_dim; ++i)
    out[static_cast<std::size_t>(i)] =
        out[static_cast<std::size_t>(i)] * scale[static_cast<std::size_t>(i)] +
        mean[static_cast<std::size_t>(i)];
  return out;
}

std::vector<double> KeyPerturbGenerator::sample(Rng& rng) const {
  std::vector<double> z(static_cast<std::size_t>(latent_dim));
  for (auto& v : z) v = rng.gaussian();
  std::vector<double> out = decode_whitened(*this, z);
  for (int i = 0; i < out_dim; ++i) {
    const double noisy = out[static_cast<std::size_t>(i)] + out_noise * rng.gaussian();
    out[static_cast<std::size_t>(i)] =
        noisy * scale[static_cast<std::size_t>(i)] + mean[static_cast<std::size_t>(i)];
  }
  return out;
}

namespace {

struct Adam {
  std::vector<double> m, v;
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long long t = 0;

  Adam(std::size_t n, double lr_in) : m(n, 0.0), v(n, 0.0), lr(lr_in) {}

  void update(std::vector<double>& w, const std::vector<double>& g) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

// one-hidden-layer Gaussian VAE on whitened data
struct Vae {
  int in_dim, hidden, latent;
  // encoder
  std::vector<double> ew, eb;    // in -> hidden (tanh)
  std::vector<double> mw, mb;    // hidden -> latent (mu)
  std::vector<double> lw, lb;    // hidden -> latent (logvar)
  // decoder
  std::vector<double> dw1, db1;  // latent -> hidden (tanh)
  std::vector<double> dw2, db2;  // hidden -> in (linear)

  Vae(int in, int h, int z, Rng& rng) : in_dim(in), hidden(h), latent(z) {
    auto init = [&rng](std::vector<double>& w, int rows, int cols) {
      w.resize(static_cast<std::size_t>(rows) * cols);
      const double s = 1.0 / std::sqrt(static_cast<double>(cols));
      for (auto& v : w) v = s * rng.gaussian();
    };
    init(ew, hidden, in_dim);
    eb.assign(static_cast<std::size_t>(hidden), 0.0);
    init(mw, latent, hidden);
    mb.assign(static_cast<std::size_t>(latent), 0.0);
    init(lw, latent, hidden);
    lb.assign(static_cast<std::size_t>(latent), 0.0);
    init(dw1, hidden, latent);
    db1.assign(static_cast<std::size_t>(hidden), 0.0);
    init(dw2, in_dim, hidden);
    db2.assign(static_cast<std::size_t>(in_dim), 0.0);
  }

  std::vector<std::vector<double>*> tensors() {
    return {&ew, &eb, &mw, &mb, &lw, &lb, &dw1, &db1, &dw2, &db2};
  }
};

void affine_fwd(const std::vector<double>& w, const std::vector<double>& b,
                const std::vector<double>& x, std::vector<double>& y, bool tanh_act) {
  const int rows = static_cast<int>(b.size());
  const int cols = static_cast<int>(x.size());
  y.resize(b.size());
  for (int o = 0; o < rows; ++o) {
    double acc = b[static_cast<std::size_t>(o)];
    const double* row = w.data() + static_cast<std::size_t>(o) * cols;
    for (int i = 0; i < cols; ++i) acc += row[i] * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = tanh_act ? std::tanh(acc) : acc;
  }
}

// dy is d(loss)/d(pre-activation); accumulates weight grads and returns dx
void affine_bwd(const std::vector<double>& w, const std::vector<double>& x,
                const std::vector<double>& dy, std::vector<double>& gw,
                std::vector<double>& gb, std::vector<double>& dx) {
  const int rows = static_cast<int>(dy.size());
  const int cols = static_cast<int>(x.size());
  dx.assign(x.size(), 0.0);
  for (int o = 0; o < rows; ++o) {
    const double d = dy[static_cast<std::size_t>(o)];
    gb[static_cast<std::size_t>(o)] += d;
    double* gr = gw.data() + static_cast<std::size_t>(o) * cols;
    const double* wr = w.data() + static_cast<std::size_t>(o) * cols;
    for (int i = 0; i < cols; ++i) {
      gr[i] += d * x[static_cast<std::size_t>(i)];
      dx[static_cast<std::size_t>(i)] += d * wr[i];
    }
  }
}

void tanh_bwd(const std::vector<double>& act, std::vector<double>& d) {
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - act[i] * act[i];
}

}  // namespace

KeyPerturbGenerator train_generator(const std::vector<std::vector<double>>& kappas,
                                    SchemeKind scheme,
                                    const GeneratorTrainOptions& opts) {
  if (kappas.size() < 100)
    throw std::invalid_argument("train_generator: need at least 100 matched pairs");
  if (opts.latent_dim < 1 || opts.hidden_dim < 1 || opts.epochs < 1 ||
      opts.batch_size < 1)
    throw std::invalid_argument("train_generator: bad options");
  if (opts.learning_rate < 0)
    throw std::invalid_argument("train_generator: bad learning rate");
  const std::size_t n = kappas.size();
  const std::size_t dim = kappas.front().size();
  for (const auto& k : kappas)
    if (k.size() != dim)
      throw std::invalid_argument("train_generator: inconsistent sample dims");

  // per-dimension whitening
  std::vector<double> mean(dim, 0.0), scale(dim, 0.0);
  for (const auto& k : kappas)
    for (std::size_t i = 0; i < dim; ++i) mean[i] += k[i];
  for (auto& v : mean) v /= static_cast<double>(n);
  for (const auto& k : kappas)
    for (std::size_t i = 0; i < dim; ++i)
      scale[i] += (k[i] - mean[i]) * (k[i] - mean[i]);
  for (auto& v : scale) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-12);

  std::vector<std::vector<double>> data(n, std::vector<double>(dim));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < dim; ++i)
      data[s][i] = (kappas[s][i] - mean[i]) / scale[i];

  Rng rng(opts.seed);
  Rng init_rng = rng.split(1);
  Vae vae(static_cast<int>(dim), opts.hidden_dim, opts.latent_dim, init_rng);

  auto tensors = vae.tensors();
  std::vector<Adam> opt;
  opt.reserve(tensors.size());
  for (auto* t : tensors) opt.emplace_back(t->size(), opts.learning_rate);
  std::vector<std::vector<double>> grads(tensors.size());

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::vector<double> recon_history;  // deterministic probe, decoded at z = mu
  std::vector<double> loss_history;
  std::vector<double> h, mu, logvar, z, dh, dec_h, out;
  std::vector<double> dmu, dlogvar, dz, d_dec_h, dout, dx_sink;

  // Gaussian decoder with a learned global variance: the reconstruction term
  // is scaled by 1/gamma2, re-estimated from the residuals each epoch. This
  // keeps prior samples from collapsing toward the data mean.
  double gamma2 = 1.0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng erng = rng.split(0x200u + static_cast<std::uint64_t>(epoch));
    shuffle(order, erng);
    double epoch_sq = 0.0, epoch_loss = 0.0;

    for (std::size_t pos = 0; pos < n; pos += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t end = std::min(n, pos + static_cast<std::size_t>(opts.batch_size));
      const double inv = 1.0 / static_cast<double>(end - pos);
      for (std::size_t t = 0; t < tensors.size(); ++t)
        grads[t].assign(tensors[t]->size(), 0.0);

      for (std::size_t s = pos; s < end; ++s) {
        const auto& x = data[order[s]];
        affine_fwd(vae.ew, vae.eb, x, h, true);
        affine_fwd(vae.mw, vae.mb, h, mu, false);
        affine_fwd(vae.lw, vae.lb, h, logvar, false);
        z.resize(mu.size());
        std::vector<double> noise(mu.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
          noise[i] = erng.gaussian();
          z[i] = mu[i] + std::exp(0.5 * logvar[i]) * noise[i];
        }
        affine_fwd(vae.dw1, vae.db1, z, dec_h, true);
        affine_fwd(vae.dw2, vae.db2, dec_h, out, false);

        double sq = 0.0, kl = 0.0;
        dout.resize(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
          const double diff = out[i] - x[i];
          sq += diff * diff;
          dout[i] = inv * diff / gamma2;
        }
        for (std::size_t i = 0; i < mu.size(); ++i)
          kl += 0.5 * (mu[i] * mu[i] + std::exp(logvar[i]) - logvar[i] - 1.0);
        epoch_sq += sq;
        epoch_loss += 0.5 * sq / gamma2 +
                      0.5 * static_cast<double>(dim) * std::log(gamma2) +
                      opts.kl_weight * kl;

        affine_bwd(vae.dw2, dec_h, dout, grads[8], grads[9], d_dec_h);
        tanh_bwd(dec_h, d_dec_h);
        affine_bwd(vae.dw1, z, d_dec_h, grads[6], grads[7], dz);

        dmu.resize(mu.size());
        dlogvar.resize(mu.size());
        for (std::size_t i = 0; i < mu.size(); ++i) {
          dmu[i] = dz[i] + opts.kl_weight * inv * mu[i];
          dlogvar[i] = dz[i] * 0.5 * std::exp(0.5 * logvar[i]) * noise[i] +
                       opts.kl_weight * inv * 0.5 * (std::exp(logvar[i]) - 1.0);
        }
        affine_bwd(vae.mw, h, dmu, grads[2], grads[3], dh);
        affine_bwd(vae.lw, h, dlogvar, grads[4], grads[5], dx_sink);
        for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += dx_sink[i];
        tanh_bwd(h, dh);
        affine_bwd(vae.ew, x, dh, grads[0], grads[1], dx_sink);
      }

      for (std::size_t t = 0; t < tensors.size(); ++t)
        opt[t].update(*tensors[t], grads[t]);
    }
    const double mse = epoch_sq / (static_cast<double>(n) * static_cast<double>(dim));
    gamma2 = std::max(mse, 1e-8);

    // noise-free reconstruction probe so the progress check is deterministic
    double probe_sq = 0.0;
    const std::size_t probe_n = std::min<std::size_t>(n, 256);
    for (std::size_t s2 = 0; s2 < probe_n; ++s2) {
      const auto& x = data[s2];
      affine_fwd(vae.ew, vae.eb, x, h, true);
      affine_fwd(vae.mw, vae.mb, h, mu, false);
      affine_fwd(vae.dw1, vae.db1, mu, dec_h, true);
      affine_fwd(vae.dw2, vae.db2, dec_h, out, false);
      for (std::size_t i = 0; i < out.size(); ++i)
        probe_sq += (out[i] - x[i]) * (out[i] - x[i]);
    }
    recon_history.push_back(probe_sq /
                            (static_cast<double>(probe_n) * static_cast<double>(dim)));
    loss_history.push_back(epoch_loss / static_cast<double>(n));
    if (!std::isfinite(loss_history.back()))
      throw TrainingError("train_generator: loss diverged", epoch);
    if (epoch == 9 && recon_history[9] >= recon_history[0])
      throw TrainingError(
          "train_generator: reconstruction loss not decreasing over the first "
          "10 epochs",
          epoch);
  }

  KeyPerturbGenerator gen;
  gen.scheme = scheme;
  gen.latent_dim = opts.latent_dim;
  gen.hidden_dim = opts.hidden_dim;
  gen.out_dim = static_cast<int>(dim);
  gen.w1 = std::move(vae.dw1);
  gen.b1 = std::move(vae.db1);
  gen.w2 = std::move(vae.dw2);
  gen.b2 = std::move(vae.db2);
  gen.mean = std::move(mean);
  gen.scale = std::move(scale);
  gen.out_noise = std::sqrt(gamma2);
  gen.loss_history = std::move(loss_history);
  return gen;
}

KeyPerturbGenerator untrained_generator(int out_dim, SchemeKind scheme,
                                        std::uint64_t seed, int latent_dim,
                                        int hidden_dim) {
  if (out_dim < 1) throw std::invalid_argument("generator: bad output dim");
  KeyPerturbGenerator gen;
  gen.scheme = scheme;
  gen.latent_dim = latent_dim;
  gen.hidden_dim = hidden_dim;
  gen.out_dim = out_dim;
  Rng rng(seed);
  auto fill = [&rng](std::vector<double>& w, std::size_t count) {
    w.resize(count);
    for (auto& v : w) v = rng.gaussian();
  };
  fill(gen.w1, static_cast<std::size_t>(hidden_dim) * latent_dim);
  fill(gen.b1, static_cast<std::size_t>(hidden_dim));
  fill(gen.w2, static_cast<std::size_t>(out_dim) * hidden_dim);
  fill(gen.b2, static_cast<std::size_t>(out_dim));
  gen.mean.assign(static_cast<std::size_t>(out_dim), 0.0);
  gen.scale.assign(static_cast<std::size_t>(out_dim), 1.0);
  return gen;
}

KeyPerturbGenerator zero_generator(int out_dim, SchemeKind scheme,
                                   int latent_dim, int hidden_dim) {
  if (out_dim < 1) throw std::invalid_argument("generator: bad output dim");
  KeyPerturbGenerator gen;
  gen.scheme = scheme;
  gen.latent_dim = latent_dim;
  gen.hidden_dim = hidden_dim;
  gen.out_dim = out_dim;
  gen.w1.assign(static_cast<std::size_t>(hidden_dim) * latent_dim, 0.0);
  gen.b1.assign(static_cast<std::size_t>(hidden_dim), 0.0);
  gen.w2.assign(static_cast<std::size_t>(out_dim) * hidden_dim, 0.0);
  gen.b2.assign(static_cast<std::size_t>(out_dim), 0.0);
  gen.mean.assign(static_cast<std::size_t>(out_dim), 0.0);
  gen.scale.assign(static_cast<std::size_t>(out_dim), 1.0);
  return gen;
}

double check_distribution_transfer(const Model& model, const OwnershipKey& key,
                                   const IdentityMessage& m,
                                   const KeyPerturbGenerator& gen, double sigma,
                                   int samples, std::uint64_t seed,
                                   const std::vector<double>& t_grid) {
  if (samples < 1) throw std::invalid_argument("transfer check: samples must be >= 1");
  if (sigma <= 0) throw std::invalid_argument("transfer check: sigma must be > 0");
  if (static_cast<std::size_t>(gen.out_dim) != key_perturb_dim(key))
    throw std::invalid_argument("transfer check: generator/key dim mismatch");

  std::vector<double> model_side, key_side;
  model_side.reserve(static_cast<std::size_t>(samples));
  key_side.reserve(static_cast<std::size_t>(samples));
  Rng base(seed);
  for (int i = 0; i < samples; ++i) {
    Rng mr = base.split(0x10000u + static_cast<std::uint64_t>(i));
    const auto mu = gaussian_perturbation(model.param_count(), sigma, mr);
    model_side.push_back(wm_loss(perturb(model, mu), key, m));
    Rng kr = base.split(0x20000u + static_cast<std::uint64_t>(i));
    const auto kappa = gen.sample(kr);
    key_side.push_back(wm_loss(model, perturb_key(key, kappa), m));
  }
  std::sort(model_side.begin(), model_side.end());
  std::sort(key_side.begin(), key_side.end());

  auto cdf = [](const std::vector<double>& sorted, double t) {
    const auto it = std::upper_bound(sorted.begin(), sorted.end(), t);
    return static_cast<double>(it - sorted.begin()) /
           static_cast<double>(sorted.size());
  };

  std::vector<double> grid = t_grid;
  if (grid.empty()) {
    grid = model_side;
    grid.insert(grid.end(), key_side.begin(), key_side.end());
  }
  double gap = 0.0;
  for (double t : grid)
    gap = std::max(gap, std::abs(cdf(model_side, t) - cdf(key_side, t)));
  return gap;
}

IdentityMessage mrov_v_verify(const Model& model, const OwnershipKey& key,
                              const KeyPerturbGenerator& gen, int rounds,
                              std::uint64_t seed) {
  if (rounds < 1) throw std::invalid_argument("mrov_v_verify: rounds must be >= 1");
  if (static_cast<std::size_t>(gen.out_dim) != key_perturb_dim(key))
    throw std::invalid_argument("mrov_v_verify: generator/key dim mismatch");
  std::vector<IdentityMessage> votes;
  votes.reserve(static_cast<std::size_t>(rounds));
  Rng base(seed);
  for (int r = 0; r < rounds; ++r) {
    Rng rng = base.split(static_cast<std::uint64_t>(r));
    votes.push_back(verify(model, perturb_key(key, gen.sample(rng))));
  }
  return majority_vote(votes);
}

EmbedResult embed_robust_key(const Model& watermarked, const OwnershipKey& key,
                             const IdentityMessage& m,
                             const KeyPerturbGenerator& gen, int reg_samples,
                             const Dataset& train_set, const Dataset& test_set,
                             const TrainConfig& cfg) {
  if (reg_samples < 1)
    throw std::invalid_argument("embed_robust_key: reg_samples must be >= 1");
  if (static_cast<std::size_t>(gen.out_dim) != key_perturb_dim(key))
    throw std::invalid_argument("embed_robust_key: generator/key dim mismatch");

  const double base_acc = accuracy(watermarked, test_set);
  auto counter = std::make_shared<std::uint64_t>(0);
  const LossTerm reg = [&key, m, &gen, reg_samples, counter, seed = cfg.seed](
                           const Model& model, std::span<double> grad) -> double {
    Rng base = Rng(seed).split(0x14e0u + (*counter)++);
    const double inv = 1.0 / static_cast<double>(reg_samples);
    double loss = 0.0;
    std::vector<double> pgrad(grad.empty() ? 0 : model.param_count());
    for (int p = 0; p < reg_samples; ++p) {
      Rng rng = base.split(static_cast<std::uint64_t>(p));
      const OwnershipKey shifted = perturb_key(key, gen.sample(rng));
      const LossTerm inner = wm_loss_term(shifted, m);
      if (grad.empty()) {
        loss += inv * inner(model, {});
      } else {
        std::fill(pgrad.begin(), pgrad.end(), 0.0);
        loss += inv * inner(model, pgrad);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += inv * pgrad[i];
      }
    }
    return loss;
  };

  EmbedResult result;
  result.model = watermarked;
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
  // fidelity relative to the pre-fine-tuning watermarked model
  result.fidelity = base_acc - accuracy(result.model, test_set);
  return result;
}

void save_generator_json(const KeyPerturbGenerator& gen,
                         const std::filesystem::path& path) {
  nlohmann::json j;
  j["scheme"] = to_string(gen.scheme);
  j["latent_dim"] = gen.latent_dim;
  j["hidden_dim"] = gen.hidden_dim;
  j["out_dim"] = gen.out_dim;
  j["w1"] = gen.w1;
  j["b1"] = gen.b1;
  j["w2"] = gen.w2;
  j["b2"] = gen.b2;
  j["mean"] = gen.mean;
  j["scale"] = gen.scale;
  j["out_noise"] = gen.out_noise;
  j["loss_history"] = gen.loss_history;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
}

KeyPerturbGenerator load_generator_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  KeyPerturbGenerator gen;
  gen.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  gen.latent_dim = j.at("latent_dim").get<int>();
  gen.hidden_dim = j.at("hidden_dim").get<int>();
  gen.out_dim = j.at("out_dim").get<int>();
  gen.w1 = j.at("w1").get<std::vector<double>>();
  gen.b1 = j.at("b1").get<std::vector<double>>();
  gen.w2 = j.at("w2").get<std::vector<double>>();
  gen.b2 = j.at("b2").get<std::vector<double>>();
  gen.mean = j.at("mean").get<std::vector<double>>();
  gen.scale = j.at("scale").get<std::vector<double>>();
  gen.out_noise = j.value("out_noise", 0.0);
  gen.loss_history = j.at("loss_history").get<std::vector<double>>();
  return gen;
}

void save_matched_pairs_csv(const MatchResult& result,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "# wmcap-v1\n";
  out << "# dropped=" << result.dropped << "\n";
  out << "pair,mu_norm,kappa_norm,loss_gap\n";
  char buf[64];
  for (std::size_t i = 0; i < result.pairs.size(); ++i) {
    const auto& p = result.pairs[i];
    double mn = 0, kn = 0;
    for (double v : p.mu) mn += v * v;
    for (double v : p.kappa) kn += v * v;
    out << i;
    std::snprintf(buf, sizeof(buf), ",%.12g", std::sqrt(mn));
    out << buf;
    std::snprintf(buf, sizeof(buf), ",%.12g", std::sqrt(kn));
    out << buf;
    std::snprintf(buf, sizeof(buf), ",%.12g", p.gap);
    out << buf << '\n';
  }
}

}  // namespace wmcap
