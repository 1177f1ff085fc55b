#pragma once

#include <stdexcept>
#include <string>

namespace wmcap {

// Loss became non-finite during an optimization loop.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// Embedding finished its epoch budget without reaching zero BER.
class EmbeddingError : public std::runtime_error {
 public:
  EmbeddingError(const std::string& what, double final_ber)
      : std::runtime_error(what), final_ber_(final_ber) {}
  double final_ber() const { return final_ber_; }

 private:
  double final_ber_;
};

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No admissible message length exists below the configured maximum.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wmcap
