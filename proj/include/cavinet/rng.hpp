#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "cavinet/common.hpp"

namespace cavinet {

// Counter-style PRNG built on the splitmix64 finalizer. All randomness in the
// project flows from one master seed through named substreams, so adding a new
// consumer never perturbs existing streams. Distributions are implemented
// explicitly to keep sequences identical across standard libraries.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; draws two uniforms per call.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer on [lo, hi], inclusive, rejection-unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) raise<UsageError>("uniform_int: empty range [", lo, ", ", hi, "]");
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
    std::uint64_t zone = (UINT64_MAX / span) * span;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= zone);
    return lo + static_cast<std::int64_t>(x % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
};

inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derives an independent stream from (master seed, stream name).
inline RandomStream substream(std::uint64_t master, std::string_view name) {
  std::uint64_t z = master ^ hash_name(name);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return RandomStream(z ^ (z >> 31));
}

inline RandomStream substream(std::uint64_t master, std::string_view name,
                              std::uint64_t a) {
  return substream(master ^ (0x9e3779b97f4a7c15ull * (a + 1)), name);
}

inline RandomStream substream(std::uint64_t master, std::string_view name,
                              std::uint64_t a, std::uint64_t b) {
  return substream(master ^ (0x9e3779b97f4a7c15ull * (a + 1)) ^
                       (0xc2b2ae3d27d4eb4full * (b + 1)),
                   name);
}

}  // namespace cavinet
