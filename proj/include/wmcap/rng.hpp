#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace wmcap {

// Deterministic splittable PRNG (splitmix64 core). Every random choice in the
// library flows through an instance of this class; there is no global RNG
// state. split(tag) is a pure function of the base seed and the tag, so child
// streams do not depend on how much the parent has already consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : base_(seed), state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal, Box-Muller; consumes two uniforms per call
  double gaussian() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  Rng split(std::uint64_t tag) const {
    return Rng(mix(base_ ^ mix(tag + 0x632be59bd9b4e019ULL)));
  }

  std::uint64_t base_seed() const { return base_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t base_;
  std::uint64_t state_;
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace wmcap
