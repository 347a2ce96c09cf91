#pragma once

#include <cstdint>
#include <string_view>

namespace hyperrag {

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class SplitMix64 {
 public:
  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) from the top 24 bits; exact in float.
  constexpr float next_unit_float() noexcept {
    return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f);
  }

  // Uniform in [0, 1) from the top 53 bits.
  constexpr double next_unit_double() noexcept {
    return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Uniform integer in [0, n). Modulo bias is irrelevant at the sizes used here.
  constexpr std::uint64_t next_below(std::uint64_t n) noexcept { return next() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace hyperrag
