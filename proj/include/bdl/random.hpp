#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bdl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Child seed for a named purpose: splitmix64(seed ^ fnv1a64(purpose)).
/// Every random quantity in an experiment is derived from the global seed
/// through this function.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return splitmix64(seed ^ fnv1a64(purpose));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(seed ^ splitmix64(a)) ^ (b * 0x9e3779b97f4a7c15ULL + 1));
}

/// Gaussian draws keyed by (trajectory seed, step). The same key always
/// reproduces the same sequence, independent of scheduling order.
class NoiseStream {
 public:
  NoiseStream(std::uint64_t trajectory_seed, std::uint64_t step)
      : engine_(derive_seed(trajectory_seed, step, 0x6e6f697365ULL)) {}

  double normal() { return dist_(engine_); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

}  // namespace bdl
