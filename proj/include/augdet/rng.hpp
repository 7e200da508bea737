// Deterministic PRNG with a fixed bit contract: xoshiro256++ seeded through
// splitmix64. Identical seeds produce identical streams on every platform;
// all derived draws (uniforms, bounded ints, shuffles, stream splits) are
// specified below in terms of the raw 64-bit output so golden tests stay
// portable.
#pragma once

#include <cstdint>
#include <vector>

namespace augdet {

// splitmix64 step (Vigna's reference constants).
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64_next(sm);
  }

  std::uint64_t seed() const { return seed_; }

  // xoshiro256++ step.
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1): top 53 bits scaled by 2^-53.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Bounded integer in [0, n) via Lemire's multiply-shift reduction.
  std::uint64_t below(std::uint64_t n) {
    const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

  // Child stream for parallel-safe seed splitting: derived from the parent
  // seed and the stream id only, so it does not depend on draw order.
  Rng split(std::uint64_t stream) const {
    std::uint64_t s = seed_;
    std::uint64_t a = splitmix64_next(s);
    s = a ^ (stream + 0x9E3779B97F4A7C15ull);
    return Rng(splitmix64_next(s));
  }

  // Fisher-Yates, descending index order.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
  std::uint64_t seed_;
};

}  // namespace augdet
