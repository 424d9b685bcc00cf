#pragma once

// Philox4x32-10 counter-based generator (Salmon et al. constants). Output is a
// pure function of (counter, key), so seeded fields do not depend on draw
// order or platform.

#include <array>
#include <cstdint>

namespace hermflow {

class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr const char* kAlgorithm = "philox4x32-10";

  static Counter generate(Counter c, Key k) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        k[0] += 0x9E3779B9u;
        k[1] += 0xBB67AE85u;
      }
      const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c[0];
      const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
      c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
    return c;
  }

  static Key key_from_seed(std::uint64_t seed) {
    return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  }

  /// Two doubles in [0, 1) with 53 random bits each, from one counter block.
  static std::array<double, 2> uniform_pair(std::uint64_t index, std::uint64_t stream,
                                            std::uint64_t seed) {
    const Counter out = generate({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                                  static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)},
                                 key_from_seed(seed));
    auto to_unit = [](std::uint32_t a, std::uint32_t b) {
      const std::uint64_t bits = (std::uint64_t{a >> 5} << 26) | (b >> 6);
      return static_cast<double>(bits) * 0x1.0p-53;
    };
    return {to_unit(out[0], out[1]), to_unit(out[2], out[3])};
  }
};

}  // namespace hermflow
