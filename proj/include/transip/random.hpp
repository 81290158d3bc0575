#pragma once

#include <cstdint>
#include <random>

namespace transip {

// Independent random streams derived from one master seed. Every consumer
// draws from its own (stream, index) pair so results do not depend on the
// order in which consumers run.
enum class Stream : std::uint64_t {
  kRecord = 1,
  kShuffle = 2,
  kDropout = 3,
  kRotation = 4,
  kSplit = 5,
  kProbe = 6,
  kInit = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(master) ^ static_cast<std::uint64_t>(stream)) ^ index);
}

inline std::mt19937_64 make_rng(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  return std::mt19937_64(derive_seed(master, stream, index));
}

}  // namespace transip
