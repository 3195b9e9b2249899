#pragma once

// Deterministic random number generation.
//
// Every random decision in the project is drawn from a Pcg32 stream derived
// from (master seed, purpose tag, step, index) via splitmix64 mixing.  Streams
// are stateless with respect to the training loop: step s of a resumed run
// re-derives exactly the stream that step s of an uninterrupted run would use,
// which is what makes checkpoint resume bit-identical.  All distributions are
// hand-rolled (std::normal_distribution et al. are implementation-defined and
// would tie outputs to a particular standard library).

#include <cmath>
#include <cstdint>

namespace mos {

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// PCG-XSH-RR 64/32 (O'Neill 2014).
class Pcg32 {
 public:
  explicit Pcg32(uint64_t seed, uint64_t stream = 0) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    uint64_t hi = next_u32();
    uint64_t lo = next_u32();
    return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1.0p-53;
  }

  float next_float() { return static_cast<float>(next_double()); }

  // Uniform integer in [0, bound) by rejection (unbiased).
  uint32_t next_below(uint32_t bound) {
    uint32_t threshold = (-bound) % bound;
    for (;;) {
      uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 1;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent stream from a master seed and up to three indices.
// The tag keeps unrelated consumers (init, data, per-step noise, ...) apart.
inline Pcg32 derive_rng(uint64_t master, uint64_t tag, uint64_t a = 0, uint64_t b = 0) {
  uint64_t x = master;
  uint64_t seed = splitmix64(x);
  x ^= 0x632be59bd9b4e019ull * (tag + 1);
  seed ^= splitmix64(x);
  x ^= 0x9e6c63d0a2871b4cull * (a + 1);
  seed ^= splitmix64(x);
  x ^= 0xc2b2ae3d27d4eb4full * (b + 1);
  seed ^= splitmix64(x);
  return Pcg32(seed, splitmix64(x));
}

// Stream tags (kept in one place so collisions are impossible by inspection).
namespace rng_tag {
constexpr uint64_t kInit = 1;       // parameter initialization; a = module ordinal
constexpr uint64_t kDataset = 2;    // scene/edit sampling; a = sample index
constexpr uint64_t kTrainStep = 3;  // per-step noise/timestep/dropout; a = step, b = sample slot
constexpr uint64_t kEval = 4;       // frozen validation draws; a = sample index
constexpr uint64_t kSample = 5;     // inference-time noise; a = user seed
constexpr uint64_t kRouter = 6;     // epsilon-greedy exploration; a = step, b = sample slot
}  // namespace rng_tag

}  // namespace mos
