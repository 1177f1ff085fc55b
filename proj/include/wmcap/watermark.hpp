#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "wmcap/message.hpp"
#include "wmcap/model.hpp"
#include "wmcap/train.hpp"

namespace wmcap {

enum class SchemeKind { WhiteBox, BlackBox };

std::string to_string(SchemeKind k);
SchemeKind scheme_from_string(const std::string& s);

// Projection key: message bit i is read off the sign of (X.W + b)[i], where
// W is the flattened weight block of the target layer.
struct WhiteBoxKey {
  int length = 0;        // L
  int target_layer = 1;  // which layer's weights form W
  int proj_dim = 0;      // P = weight count of the target layer
  std::uint64_t seed = 0;
  std::vector<double> projection;  // L x P, row-major, regenerable from seed
  std::vector<double> bias;        // length L, zero at keygen
};

// Trigger key: each of the T triggers carries floor(log2 B) message bits via
// its assigned class label.
struct BlackBoxKey {
  int length = 0;  // L
  int classes = 0;
  int bits_per_trigger = 0;
  int trigger_count = 0;
  int input_dim = 0;
  double box_lo = -3.0;
  double box_hi = 3.0;
  std::uint64_t seed = 0;
  std::vector<double> triggers;  // T x d, row-major
};

using OwnershipKey = std::variant<WhiteBoxKey, BlackBoxKey>;

SchemeKind kind_of(const OwnershipKey& key);
int message_length(const OwnershipKey& key);

OwnershipKey keygen_white_box(int length, const Model& model,
                              std::uint64_t seed, int target_layer = 1);
OwnershipKey keygen_black_box(int length, int classes, int input_dim,
                              std::uint64_t seed, double box_lo = -3.0,
                              double box_hi = 3.0);

std::vector<double> regen_projection(int length, int proj_dim,
                                     std::uint64_t seed);

// Vanilla interpreter: class -> floor(log2 B) bits, MSB first. Classes at or
// above 2^bits are clamped so the inverse stays well defined.
std::vector<std::uint8_t> interpret_class(int cls, int classes);
int class_from_bits(std::span<const std::uint8_t> bits, int classes);

// Labels the key's triggers with the message bits (zero-padded at the tail).
std::vector<int> trigger_labels(const BlackBoxKey& key,
                                const IdentityMessage& m);

// Embedding loss: mean binary cross-entropy of sigmoid(X.W + b) against m
// (white-box), or mean class cross-entropy of the trigger predictions
// against the message labels (black-box). Natural-log cross-entropies.
double wm_loss(const Model& model, const OwnershipKey& key,
               const IdentityMessage& m);

// Same loss as a trainable term for train().
LossTerm wm_loss_term(const OwnershipKey& key, const IdentityMessage& m);

IdentityMessage verify(const Model& model, const OwnershipKey& key);

struct EmbedResult {
  Model model;
  double fidelity = 0;  // test accuracy lost relative to the input model
  double final_ber = 0;
  std::vector<double> ber_history;  // after each embedding epoch
};

// Fine-tunes `clean` against data loss + lambda * wm_loss until the epoch
// budget runs out; throws EmbeddingError if the final BER is not zero.
EmbedResult embed(const Model& clean, const OwnershipKey& key,
                  const IdentityMessage& m, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& cfg);

// Key-space perturbation surface used by multi-round verification: white-box
// perturbs the projection entries, black-box perturbs the trigger inputs
// (clamped back into the trigger box).
std::size_t key_perturb_dim(const OwnershipKey& key);
OwnershipKey perturb_key(const OwnershipKey& key, std::span<const double> kappa);

// wm_loss along with its gradient in the key-perturbation coordinates.
double wm_loss_key_grad(const Model& model, const OwnershipKey& key,
                        const IdentityMessage& m, std::span<double> grad_kappa);

// White-box keys persist as seed + dims (projection regenerated on load);
// black-box keys persist the trigger matrix.
void save_key_json(const OwnershipKey& key, const std::filesystem::path& path);
OwnershipKey load_key_json(const std::filesystem::path& path);

}  // namespace wmcap
