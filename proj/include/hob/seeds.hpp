#pragma once

#include <cstdint>

namespace hob {

// A run has one seed. Each component draws from splitmix64(base, fixed offset) so that
// changing how one component consumes randomness never shifts another, and nearby
// base seeds do not share streams.
enum class SeedStream : std::uint64_t {
  data = 1,
  init = 2,
  shuffle = 3,
  gradcheck = 4,
  insert = 5,
};

constexpr std::uint64_t derive_seed(std::uint64_t base, SeedStream s) {
  std::uint64_t z = base * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(s) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace hob
