#pragma once

#include <cstdint>

namespace vitplast {

/// Independent 64-bit seed for stream `index` under `seed` (splitmix64
/// finalizer). Used wherever a result must not depend on how many other
/// streams were drawn before it.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace vitplast
