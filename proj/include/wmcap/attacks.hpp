#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "wmcap/dataset.hpp"
#include "wmcap/train.hpp"
#include "wmcap/watermark.hpp"

namespace wmcap {

enum class AttackKind { FineTune, Prune, Overwrite, AdvOverwrite };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::FineTune;
  double adversary_fraction = 0.1;  // share of the training data the adversary holds
  double lambda = 0.1;              // overwriting regularizer weight
  int epochs_per_round = 1;
  double prune_step = 0.05;  // cumulative pruned fraction added per round
  std::uint64_t seed = 0;
  // Defaults are derived from `seed` when absent: a random message distinct
  // from the owner's, and (Overwrite only) a fresh key of the same shape.
  std::optional<IdentityMessage> adversary_message;
  std::optional<OwnershipKey> adversary_key;
};

// Uniform random message, deterministic in seed, never equal to *exclude.
IdentityMessage random_message(std::size_t length, std::uint64_t seed,
                               const IdentityMessage* exclude = nullptr);

// One adversarial modification trajectory. FineTune and Prune never look at
// the owner's key; AdvOverwrite re-embeds a random message through it.
class AttackRunner {
 public:
  AttackRunner(AttackConfig cfg, Dataset adversary_data, TrainConfig train_cfg,
               const OwnershipKey* owner_key = nullptr,
               const IdentityMessage* owner_message = nullptr);

  Model step(const Model& m);  // one attack round

  AttackKind kind() const { return cfg_.kind; }
  int rounds_done() const { return rounds_; }
  double pruned_fraction() const { return pruned_fraction_; }

 private:
  Model gradient_round(const Model& m);
  Model prune_round(const Model& m);

  AttackConfig cfg_;
  Dataset adversary_data_;
  TrainConfig train_cfg_;
  std::optional<OwnershipKey> owner_key_;
  std::optional<IdentityMessage> adversary_message_;
  std::optional<OwnershipKey> adversary_key_;
  int rounds_ = 0;
  double pruned_fraction_ = 0.0;
};

}  // namespace wmcap
