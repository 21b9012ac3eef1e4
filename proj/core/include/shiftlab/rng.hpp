#pragma once

#include <array>
#include <cstdint>

namespace shiftlab {

/// SplitMix64 finaliser (Steele, Lea & Flood 2014). Used for seeding and for
/// deriving independent sub-streams.
std::uint64_t splitmix64(std::uint64_t& state);

/// Mixes a base seed with a stream identifier: splitmix64(seed ^ stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// xoshiro256** 1.0 (Blackman & Vigna), state filled by four SplitMix64 draws
/// from the seed. The reference sequence is the one published at
/// https://prng.di.unimi.it/, so fixtures recorded here can be reproduced in
/// any language.
///
/// Floating-point draws:
///   uniform()  = (next() >> 11) * 2^-53, in [0, 1)
///   normal()   = Box-Muller on two uniforms (the sine branch is discarded)
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  /// Unbiased uniform integer in [0, n) (modulo with rejection).
  std::uint64_t below(std::uint64_t n);

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace shiftlab
