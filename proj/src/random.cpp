#include "treemtl/random.hpp"

namespace treemtl {

Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x7265u};
  return Rng(seq);
}

double uniform_open(Rng& rng) {
  // 53 random bits, shifted half a step off zero.
  const std::uint64_t bits = rng() >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

void fill_normal(std::span<double> out, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : out) v = dist(rng);
}

}  // namespace treemtl
