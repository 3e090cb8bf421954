#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace idol {

// Deterministic random number generator with explicitly specified algorithms,
// so that streams are reproducible across platforms and standard library
// versions. Core generator is xoshiro256++; seeding uses splitmix64; normal
// variates use Box-Muller. Named sub-streams are derived by hashing a tag
// into the construction seed, which keeps independent consumers (e.g. the two
// modality streams of a joint sampler) decoupled: drawing from one never
// shifts the other.
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    seed_ = seed;
    // splitmix64 expansion of the seed into the xoshiro state.
    uint64_t x = seed;
    for (int i = 0; i < 4; ++i) s_[i] = splitmix64(x);
    have_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
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

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0. Uses rejection to avoid modulo bias.
  uint64_t uniform_below(uint64_t n) {
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(uniform_below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  // Standard normal via Box-Muller; generates pairs, caches the spare.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Derived stream for (construction seed, tag). Independent of how many
  // draws have been made from this generator.
  Rng derive(std::string_view tag) const { return Rng(mix(seed_, fnv1a(tag))); }

  static Rng from_seed_and_tag(uint64_t seed, std::string_view tag) {
    return Rng(mix(seed, fnv1a(tag)));
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  static uint64_t mix(uint64_t seed, uint64_t h) {
    return seed ^ (h + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t s_[4] = {};
  uint64_t seed_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Convenience: construct a stream for (seed, tag).
inline Rng named_stream(uint64_t seed, std::string_view tag) {
  return Rng::from_seed_and_tag(seed, tag);
}

}  // namespace idol
