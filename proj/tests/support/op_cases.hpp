#pragma once

// Finite-difference cases for every tape op, shared by the unit tests and the
// acceptance run.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dcopf/autodiff.hpp"

namespace ref {

using UnaryOp = std::function<dcopf::ad::Var(dcopf::ad::Tape&, dcopf::ad::Var)>;

struct OpCase {
  std::string name;
  dcopf::ad::Matrix input;
  UnaryOp op;
};

dcopf::ad::Matrix random_matrix(dcopf::ad::Index r, dcopf::ad::Index c, std::mt19937_64& rng,
                                double lo = -1.0, double hi = 1.0);

/// One case per op and per differentiated argument. Kinked ops get inputs
/// kept off their kinks.
std::vector<OpCase> op_cases(std::uint64_t seed);

/// Relative FD error of <op(x), W> for a random W fixed by `seed`.
double probe_error(const dcopf::ad::Matrix& x0, const UnaryOp& op, std::uint64_t seed);

}  // namespace ref
