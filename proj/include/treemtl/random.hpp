#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace treemtl {

using Rng = std::mt19937_64;

// Independent generator for a (seed, stream) pair. Distinct streams of the
// same seed drive data generation, initialization and routing separately,
// so changing how much one of them consumes never shifts the others.
Rng make_rng(std::uint64_t seed, std::uint64_t stream);

// Uniform draw on the open interval (0, 1).
double uniform_open(Rng& rng);

double standard_normal(Rng& rng);

// Fills with i.i.d. Normal(0, sigma) draws from one distribution object.
void fill_normal(std::span<double> out, double sigma, Rng& rng);

}  // namespace treemtl
