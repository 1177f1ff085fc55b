#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "wmcap/watermark.hpp"

namespace wmcap {

struct PerturbSpec {
  double sigma = 0.02;    // parameter-noise standard deviation
  int rounds = 100;       // R, verification rounds
  int reg_samples = 10;   // P, samples inside the robust regularizers
  int gen_samples = 10000;  // Q, matched pairs for generator training
  std::uint64_t seed = 0;
};

// Per-position majority vote over per-round retrieved messages; even-split
// ties resolve to bit 0.
IdentityMessage majority_vote(const std::vector<IdentityMessage>& rounds);

// Multi-round verification in parameter space: R draws of N(0, sigma^2 I)
// parameter noise, one verify each, majority vote per bit.
IdentityMessage mrov_verify_params(const Model& model, const OwnershipKey& key,
                                   const PerturbSpec& spec);

// Embedding with the noise-averaged regularizer: mean of wm_loss over P
// parameter perturbations per optimization step.
EmbedResult embed_robust_params(const Model& clean, const OwnershipKey& key,
                                const IdentityMessage& m,
                                const Dataset& train_set,
                                const Dataset& test_set,
                                const PerturbSpec& spec,
                                const TrainConfig& cfg);

// The robust regularizer itself. resample=false freezes the perturbation
// draws, which makes the term a fixed differentiable function (grad_check).
LossTerm robust_param_loss_term(const OwnershipKey& key,
                                const IdentityMessage& m,
                                const PerturbSpec& spec, bool resample);

struct MatchOptions {
  double tolerance = 1e-4;  // absolute loss-gap tolerance
  int max_iters = 500;
};

struct MatchedPair {
  std::vector<double> mu;     // parameter perturbation
  std::vector<double> kappa;  // key perturbation with the same embedding loss
  double gap = 0;             // achieved |loss difference|
};

// Finds kappa with wm_loss(M, K + kappa, m) == wm_loss(M + mu, K, m) by
// gradient descent on the squared gap, starting from `init` (zero when
// empty). kappa = 0 is checked first and accepted if it already matches.
// Empty on non-convergence.
std::optional<std::vector<double>> match_key_perturbation(
    const Model& model, const OwnershipKey& key, const IdentityMessage& m,
    std::span<const double> mu, const MatchOptions& opts = {},
    std::span<const double> init = {});

struct MatchResult {
  std::vector<MatchedPair> pairs;
  int dropped = 0;
};

// Samples Q parameter perturbations from N(0, sigma^2 I) and matches each
// into key space; non-converging pairs are dropped and counted.
MatchResult build_matched_pairs(const Model& model, const OwnershipKey& key,
                                const IdentityMessage& m,
                                const PerturbSpec& spec,
                                const MatchOptions& opts = {});

// VAE decoder over key perturbations, with per-dimension whitening folded in.
// Sampling draws the full generative model: decode(z) plus the learned
// decoder output noise.
struct KeyPerturbGenerator {
  SchemeKind scheme = SchemeKind::WhiteBox;
  int latent_dim = 16;
  int hidden_dim = 128;
  int out_dim = 0;
  std::vector<double> w1, b1;  // latent -> hidden (tanh)
  std::vector<double> w2, b2;  // hidden -> out (linear)
  std::vector<double> mean, scale;  // whitening, applied after the decoder
  double out_noise = 0.0;           // decoder sigma, in whitened units
  std::vector<double> loss_history;

  std::vector<double> sample(Rng& rng) const;
  std::vector<double> decode(std::span<const double> z) const;
};

struct GeneratorTrainOptions {
  int latent_dim = 16;
  int hidden_dim = 128;
  int epochs = 80;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double kl_weight = 1.0;
  std::uint64_t seed = 0;
};

// Trains a one-hidden-layer VAE on the matched key perturbations and returns
// its decoder. Requires at least 100 samples; throws TrainingError when the
// reconstruction loss fails to decrease over the first ten epochs.
KeyPerturbGenerator train_generator(const std::vector<std::vector<double>>& kappas,
                                    SchemeKind scheme,
                                    const GeneratorTrainOptions& opts);

// Random-weight generator with identity whitening; negative control.
KeyPerturbGenerator untrained_generator(int out_dim, SchemeKind scheme,
                                        std::uint64_t seed, int latent_dim = 16,
                                        int hidden_dim = 128);

// Zero generator: G(z) == 0 for every z.
KeyPerturbGenerator zero_generator(int out_dim, SchemeKind scheme,
                                   int latent_dim = 16, int hidden_dim = 128);

// Max gap between the empirical CDFs of wm_loss under parameter noise and
// under generated key noise (two-sample KS statistic when t_grid is empty).
double check_distribution_transfer(const Model& model, const OwnershipKey& key,
                                   const IdentityMessage& m,
                                   const KeyPerturbGenerator& gen, double sigma,
                                   int samples, std::uint64_t seed,
                                   const std::vector<double>& t_grid = {});

// Multi-round verification in key space: R generated key perturbations, one
// verify each, majority vote. Never touches the model parameters.
IdentityMessage mrov_v_verify(const Model& model, const OwnershipKey& key,
                              const KeyPerturbGenerator& gen, int rounds,
                              std::uint64_t seed);

// Fine-tuning with the key-noise-averaged regularizer: mean of wm_loss over
// P generated key perturbations per optimization step.
EmbedResult embed_robust_key(const Model& watermarked, const OwnershipKey& key,
                             const IdentityMessage& m,
                             const KeyPerturbGenerator& gen, int reg_samples,
                             const Dataset& train_set, const Dataset& test_set,
                             const TrainConfig& cfg);

void save_generator_json(const KeyPerturbGenerator& gen,
                         const std::filesystem::path& path);
KeyPerturbGenerator load_generator_json(const std::filesystem::path& path);

void save_matched_pairs_csv(const MatchResult& result,
                            const std::filesystem::path& path);

}  // namespace wmcap
