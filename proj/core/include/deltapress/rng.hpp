#pragma once

#include <cstdint>
#include <string_view>

namespace deltapress {

// SplitMix64 (Steele, Lea, Flood 2014). Every mask, DARE drop pattern, and
// synthetic fixture in this library draws from this generator so that
// artifacts are reproducible bit-for-bit on any platform.
class SplitMix64 {
 public:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t operator()() noexcept {
    state_ += kGamma;
    return finalize(state_);
  }

  // Uniform double in [0, 1) from the top 53 bits.
  constexpr double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes two draws per call.
  double normal() noexcept;

  static constexpr std::uint64_t finalize(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// First output of a SplitMix64 stream seeded with x.
constexpr std::uint64_t splitmix64_mix(std::uint64_t x) noexcept {
  return SplitMix64(x)();
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::string_view data,
                                std::uint64_t hash = kFnvOffset) noexcept {
  for (char c : data) {
    hash ^= static_cast<std::uint8_t>(c);
    hash *= kFnvPrime;
  }
  return hash;
}

}  // namespace deltapress
