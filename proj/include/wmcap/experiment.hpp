#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wmcap/attacks.hpp"
#include "wmcap/estimator.hpp"
#include "wmcap/mrov.hpp"

namespace wmcap {

struct DataConfig {
  int classes = 10;
  int dim = 16;
  int samples = 2000;
  double test_fraction = 0.2;
  std::uint64_t seed = 1;
};

struct MrovConfig {
  double sigma = 0.02;
  int rounds = 100;       // R
  int reg_samples = 10;   // P
  int gen_samples = 1000; // Q
  int latent_dim = 16;
  int hidden_dim = 128;
  int vae_epochs = 80;
  double match_tolerance = 1e-4;
  int match_iters = 500;
  double target_ber = 0.2;  // attack until the one-shot BER reaches this
  std::optional<std::string> generator_path;
};

// One JSON config file drives every command; see configs/ for examples.
struct ExperimentConfig {
  SchemeKind scheme = SchemeKind::WhiteBox;
  std::vector<int> length_grid;
  int identity_bits = 64;  // J
  std::vector<double> deltas;
  std::vector<AttackKind> attacks;
  std::vector<double> adversary_fractions;
  std::vector<std::uint64_t> seeds;
  DataConfig data;
  TrainConfig train;
  int embed_epochs = 30;
  double embed_lambda = 0.1;
  double attack_lambda = 0.1;
  int attack_epochs_per_round = 1;
  double prune_step = 0.05;
  int round_cap = 200;
  double length_max = 8192;
  MrovConfig mrov;
  std::optional<ClassifierSpec> synthetic;  // formula-backed minlength mode
  std::string out_dir = "out";
};

// Throws ConfigError on malformed or inconsistent input. WMCAP_OUT, when
// set, overrides out_dir.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& cfg);

// Deterministic sub-seed derivation for one experiment cell.
struct SeedPlan {
  std::uint64_t model_init;
  std::uint64_t key;
  std::uint64_t train;
  std::uint64_t message;
  std::uint64_t attack;
  std::uint64_t mrov;
};
SeedPlan derive_seeds(std::uint64_t cell_seed);

struct EmbeddedCell {
  std::uint64_t seed = 0;
  int length = 0;
  Dataset full;       // source data; adversary slices re-derive from it
  DataSplits splits;  // at the config's first adversary fraction
  Model clean;
  OwnershipKey key;
  IdentityMessage message;
  EmbedResult embedded;
};

// Shared pipeline slice: synth data, train the clean model, embed a random
// message of the requested length. Commands and tests build identical cells
// from identical (config, seed, L).
EmbeddedCell build_embedded_cell(const ExperimentConfig& cfg,
                                 std::uint64_t seed, int length);

AttackRunner make_attack_runner(const ExperimentConfig& cfg,
                                const EmbeddedCell& cell, AttackKind kind,
                                double adversary_fraction);

// Command drivers; each returns a process exit code (0 ok, 3 infeasible).
// Config problems throw ConfigError, which the CLI maps to exit code 2.
int cmd_embed(const ExperimentConfig& cfg, int jobs);
int cmd_attack(const ExperimentConfig& cfg, int jobs);
int cmd_estimate(const ExperimentConfig& cfg, int jobs);
int cmd_minlength(const ExperimentConfig& cfg, int jobs);
int cmd_mrov(const ExperimentConfig& cfg, int jobs);
int cmd_transfer(const ExperimentConfig& cfg, int jobs);
int cmd_check(const ExperimentConfig& cfg, int jobs);

}  // namespace wmcap
