#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace cmoe {

// splitmix64 finalizer. Used both to seed the main generator and to derive
// independent sub-seeds: sub_seed(master, k) is the k-th element of the
// splitmix64 stream started at `master`.
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t sub_seed(uint64_t master, uint64_t index) {
  uint64_t state = master + index * 0x9e3779b97f4a7c15ull;
  return splitmix64(state);
}

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// bit-reproducible regardless of the standard library in use.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  uint64_t next() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  uint64_t uniform_int(uint64_t n) { return next() % n; }

  // Standard normal via Box-Muller. Stateless between calls so the generator
  // state is exactly the four words below (checkpointable).
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent stream derived from this generator's seed domain.
  static Rng fork(uint64_t master, uint64_t index) { return Rng(sub_seed(master, index)); }

  std::vector<uint64_t> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }

  void set_state(const std::vector<uint64_t>& words) {
    for (size_t i = 0; i < 4 && i < words.size(); ++i) s_[i] = words[i];
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4] = {};
};

}  // namespace cmoe
