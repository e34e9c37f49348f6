#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcopf/autodiff.hpp"
#include "dcopf/grid.hpp"

namespace dcopf {

struct Sample {
  LoadVector loads;
  DispatchVector optimal_dispatch;
  double optimal_cost = 0.0;
};

/// Samples scale the base load by one uniform factor in [scale_lo, scale_hi].
struct ScenarioSpec {
  std::string name;
  double scale_lo = 0.70;
  double scale_hi = 1.00;
  std::size_t n_samples = 20000;

  void validate() const;
};

ScenarioSpec training_scenario(std::size_t n_samples = 20000);
/// The five evaluation bands, 100 samples each.
std::vector<ScenarioSpec> evaluation_scenarios(std::size_t n_samples = 100);

/// Solves the oracle for every sampled load vector. Deterministic under seed.
std::vector<Sample> generate(const PowerSystem& system, const ScenarioSpec& spec,
                             std::uint64_t seed);

/// CSV with header load_1..load_N, pg_1..pg_G, cost; full double precision.
void save_samples(const std::vector<Sample>& samples, const std::string& path);

/// Parses a file written by save_samples. Throws ParseError (with line
/// number) on malformed content, including an empty file. Re-verifies KKT
/// optimality on a deterministic `verify_fraction` of rows (at least one).
std::vector<Sample> load_samples(const std::string& path, const PowerSystem& system,
                                 double verify_fraction = 0.01);

/// Row-stacked views used by the training loops.
struct SampleMatrices {
  ad::Matrix loads;             // N x n_buses
  ad::Matrix optimal_dispatch;  // N x n_generators
  Eigen::VectorXd optimal_cost;
  Eigen::VectorXd total_load;
};

SampleMatrices stack(const std::vector<Sample>& samples);
SampleMatrices stack_rows(const SampleMatrices& all, const std::vector<std::size_t>& rows);

}  // namespace dcopf
