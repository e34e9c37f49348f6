#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "dcopf/autodiff.hpp"

namespace dcopf {

using Rng = std::mt19937_64;

/// Mixes a base seed with a named stream and an index (splitmix64 finaliser),
/// so data generation, initialisation, shuffling and evaluation never share a
/// random stream.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

/// Uniform(-bound, bound) entries.
ad::Matrix uniform_matrix(ad::Index rows, ad::Index cols, double bound, Rng& rng);

}  // namespace dcopf
