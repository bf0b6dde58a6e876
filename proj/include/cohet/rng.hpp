#pragma once

#include <cstdint>
#include <random>

namespace cohet {

using Rng = std::mt19937_64;

// Independent random streams. Each consumer draws from its own stream so that
// disabling one consumer never shifts the numbers another one sees.
enum class Stream : std::uint64_t {
  kInit = 1,
  kHeterogeneity = 2,
  kEnvReset = 3,
  kPolicy = 4,
  kDynamics = 5,
  kMinibatch = 6,
  kEval = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, Stream stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = splitmix64(base);
  s = splitmix64(s ^ static_cast<std::uint64_t>(stream));
  s = splitmix64(s ^ (a * 0x100000001b3ULL));
  s = splitmix64(s ^ (b * 0xc2b2ae3d27d4eb4fULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, Stream stream, std::uint64_t a = 0,
                    std::uint64_t b = 0) {
  return Rng(derive_seed(base, stream, a, b));
}

}  // namespace cohet
