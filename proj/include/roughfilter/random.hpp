#pragma once

// Counter-based normal variates: Philox4x32-10 keyed by the seed, counter built
// from (stream, particle, step). Any draw can be reproduced without replaying
// the ones before it, so particles and steps may be visited in any order.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace roughfilter {

enum class Stream : std::uint32_t {
  signal_noise = 1,
  initial_state = 2,
  observation_noise = 3,
  hidden_noise = 4,
  probe = 5,
};

using Philox4x32 = std::array<std::uint32_t, 4>;

inline Philox4x32 philox4x32_10(Philox4x32 ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += w0;
      key[1] += w1;
    }
    const std::uint64_t p0 = std::uint64_t{m0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{m1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

inline double unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Fills out with i.i.d. standard normals for the (seed, stream, particle, step) cell.
inline void standard_normals(std::uint64_t seed, Stream stream, std::uint64_t particle,
                             std::uint64_t step, std::span<double> out) {
  const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed),
                                         static_cast<std::uint32_t>(seed >> 32)};
  std::size_t k = 0;
  for (std::uint32_t block = 0; k < out.size(); ++block) {
    const Philox4x32 ctr{static_cast<std::uint32_t>(step),
                         static_cast<std::uint32_t>(stream) | (block << 8) |
                             (static_cast<std::uint32_t>(step >> 32) << 20),
                         static_cast<std::uint32_t>(particle),
                         static_cast<std::uint32_t>(particle >> 32)};
    const Philox4x32 r = philox4x32_10(ctr, key);
    const double u1 = unit_open((std::uint64_t{r[0]} << 32) | r[1]);
    const double u2 = unit_open((std::uint64_t{r[2]} << 32) | r[3]);
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    out[k++] = rad * std::cos(ang);
    if (k < out.size()) out[k++] = rad * std::sin(ang);
  }
}

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Per-component seed: splitmix64(splitmix64(master ^ fnv1a64(label)) + index).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(master ^ fnv1a64(label)) + index);
}

}  // namespace roughfilter
