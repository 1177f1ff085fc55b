#include "wmcap/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "wmcap/errors.hpp"

namespace wmcap {

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::FineTune: return "fine_tune";
    case AttackKind::Prune: return "prune";
    case AttackKind::Overwrite: return "overwrite";
    case AttackKind::AdvOverwrite: return "adv_overwrite";
  }
  return "fine_tune";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fine_tune") return AttackKind::FineTune;
  if (s == "prune") return AttackKind::Prune;
  if (s == "overwrite") return AttackKind::Overwrite;
  if (s == "adv_overwrite") return AttackKind::AdvOverwrite;
  throw std::invalid_argument("unknown attack kind: " + s);
}

IdentityMessage random_message(std::size_t length, std::uint64_t seed,
                               const IdentityMessage* exclude) {
  if (length == 0) throw std::invalid_argument("random_message: length must be >= 1");
  if (exclude && exclude->length() != length)
    throw std::invalid_argument("random_message: exclude length mismatch");
  Rng rng(seed);
  for (;;) {
    IdentityMessage m = uniform_message(length, rng);
    if (!exclude || !(m == *exclude)) return m;
  }
}

AttackRunner::AttackRunner(AttackConfig cfg, Dataset adversary_data,
                           TrainConfig train_cfg, const OwnershipKey* owner_key,
                           const IdentityMessage* owner_message)
    : cfg_(std::move(cfg)),
      adversary_data_(std::move(adversary_data)),
      train_cfg_(train_cfg) {
  if (!(cfg_.adversary_fraction > 0 && cfg_.adversary_fraction <= 1))
    throw std::invalid_argument("attack: adversary_fraction must be in (0,1]");
  if (cfg_.epochs_per_round < 1)
    throw std::invalid_argument("attack: epochs_per_round must be >= 1");
  if (cfg_.prune_step < 0 || cfg_.prune_step > 1)
    throw std::invalid_argument("attack: prune_step must be in [0,1]");
  if (adversary_data_.size() == 0)
    throw std::invalid_argument("attack: empty adversary dataset");

  if (owner_key) owner_key_ = *owner_key;
  adversary_message_ = cfg_.adversary_message;
  adversary_key_ = cfg_.adversary_key;

  const bool overwriting = cfg_.kind == AttackKind::Overwrite ||
                           cfg_.kind == AttackKind::AdvOverwrite;
  if (cfg_.kind == AttackKind::AdvOverwrite && !owner_key_)
    throw std::invalid_argument("adv_overwrite: the owner's key is required");
  if (overwriting && !adversary_message_) {
    int length = 0;
    if (owner_key_)
      length = message_length(*owner_key_);
    else if (adversary_key_)
      length = message_length(*adversary_key_);
    else
      throw std::invalid_argument("overwrite: cannot infer the message length");
    adversary_message_ = random_message(static_cast<std::size_t>(length),
                                        Rng(cfg_.seed).split(1).base_seed(),
                                        owner_message);
  }
}

Model AttackRunner::step(const Model& m) {
  Model out = cfg_.kind == AttackKind::Prune ? prune_round(m) : gradient_round(m);
  ++rounds_;
  return out;
}

Model AttackRunner::gradient_round(const Model& m) {
  TrainConfig cfg = train_cfg_;
  cfg.epochs = cfg_.epochs_per_round;
  cfg.seed = Rng(cfg_.seed).split(0x100u + static_cast<std::uint64_t>(rounds_)).base_seed();
  cfg.lambda = 0.0;
  LossTerm reg;

  if (cfg_.kind == AttackKind::Overwrite) {
    if (!adversary_key_) {
      // the adversary mints its own key matching the victim's shape
      if (kind_of(*owner_key_) == SchemeKind::WhiteBox) {
        const auto& wb = std::get<WhiteBoxKey>(*owner_key_);
        adversary_key_ = keygen_white_box(wb.length, m,
                                          Rng(cfg_.seed).split(2).base_seed(),
                                          wb.target_layer);
      } else {
        const auto& bb = std::get<BlackBoxKey>(*owner_key_);
        adversary_key_ = keygen_black_box(bb.length, bb.classes, bb.input_dim,
                                          Rng(cfg_.seed).split(2).base_seed(),
                                          bb.box_lo, bb.box_hi);
      }
    }
    reg = wm_loss_term(*adversary_key_, *adversary_message_);
    cfg.lambda = cfg_.lambda;
  } else if (cfg_.kind == AttackKind::AdvOverwrite) {
    reg = wm_loss_term(*owner_key_, *adversary_message_);
    cfg.lambda = cfg_.lambda;
  }

  try {
    return train(m, adversary_data_, cfg, reg).model;
  } catch (const TrainingError& e) {
    throw AttackError(std::string("attack diverged: ") + e.what());
  }
}

Model AttackRunner::prune_round(const Model& m) {
  pruned_fraction_ = std::min(1.0, pruned_fraction_ + cfg_.prune_step);

  // global magnitude pruning over hidden-layer weights (output layer and
  // biases untouched); already-zeroed weights sort first, so the pruned set
  // grows monotonically
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  std::size_t total = 0;
  for (int l = 0; l + 1 < m.layer_count(); ++l) {
    blocks.emplace_back(m.weight_offset(l), m.weight_count(l));
    total += m.weight_count(l);
  }
  std::vector<std::size_t> idx;
  idx.reserve(total);
  for (const auto& [off, n] : blocks)
    for (std::size_t i = 0; i < n; ++i) idx.push_back(off + i);

  Model out = m;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(out.params[a]);
    const double mb = std::abs(out.params[b]);
    return ma != mb ? ma < mb : a < b;
  });
  const auto k = static_cast<std::size_t>(
      pruned_fraction_ * static_cast<double>(total) + 1e-9);
  for (std::size_t i = 0; i < std::min(k, idx.size()); ++i)
    out.params[idx[i]] = 0.0;
  return out;
}

}  // namespace wmcap
