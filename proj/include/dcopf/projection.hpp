#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcopf/autodiff.hpp"
#include "dcopf/grid.hpp"

namespace dcopf {

struct ProjectionConfig {
  double tau = 0.05;         // soft-clamp temperature
  double hard_tol = 0.005;   // MW, balance tolerance of the hard projection
  int hard_max_iters = 15;
  double feas_tol = 0.1;     // MW, feasibility check tolerance

  void validate() const;
};

/// x_min + (x_max - x_min) * sigmoid(((x - x_min)/(x_max - x_min) - 0.5) / tau).
/// Returns x_min when the range is degenerate; throws when x_min > x_max.
double soft_clamp(double x, double x_min, double x_max, double tau);

/// Capacity weights (p_max - p_min) / sum_k (p_max_k - p_min_k).
Eigen::VectorXd capacity_weights(const PowerSystem& system);

/// Adds (total load - total dispatch) in proportion to capacity, then soft clamps.
DispatchVector soft_balance_project(const DispatchVector& dispatch, const LoadVector& loads,
                                    const PowerSystem& system, double tau);
/// Soft clamp followed by soft_balance_project: the training-time projection.
DispatchVector soft_project(const DispatchVector& dispatch, const LoadVector& loads,
                            const PowerSystem& system, double tau);

/// Clamp, then capacity-weighted rebalancing rounds, each followed by a clamp,
/// until |imbalance| < hard_tol. The rebalancing weights are renormalised over
/// generators with headroom in the direction of the imbalance, so the loop
/// terminates in at most n_generators + 1 rounds. Output satisfies the bounds
/// exactly. Throws InfeasibleLoadError for totals outside [sum p_min, sum
/// p_max] and ConvergenceError if the tolerance is still unmet.
DispatchVector hard_project(const DispatchVector& dispatch, const LoadVector& loads,
                            const PowerSystem& system, const ProjectionConfig& cfg = {});
DispatchVector hard_project(const DispatchVector& dispatch, double total_load,
                            const PowerSystem& system, const ProjectionConfig& cfg = {});

struct Violation {
  enum class Kind { kBelowMin, kAboveMax, kBalance, kLineFlow };
  Kind kind;
  std::size_t index = 0;   // generator or line; unused for balance
  double magnitude = 0.0;  // MW beyond the limit (signed imbalance for kBalance)
  bool informational = false;
};

struct FeasibilityReport {
  bool feasible = true;
  double balance_error = 0.0;  // sum dispatch - total load, MW
  std::vector<Violation> violations;

  std::string describe() const;
};

/// Bounds and power balance within feas_tol. When `ptdf` is given, flows over
/// finite line limits are listed as informational entries.
FeasibilityReport check_feasibility(const DispatchVector& dispatch, const LoadVector& loads,
                                    const PowerSystem& system, double feas_tol,
                                    const Eigen::MatrixXd* ptdf = nullptr);

/// Differentiable batch versions: rows are samples, columns are generators,
/// `total_load` is one entry per row.
namespace batch {

ad::Var soft_clamp(ad::Var x, const ad::RowVector& lo, const ad::RowVector& hi, double tau);
ad::Var soft_balance_project(ad::Var dispatch, const Eigen::VectorXd& total_load,
                             const PowerSystem& system, double tau);
ad::Var soft_project(ad::Var dispatch, const Eigen::VectorXd& total_load,
                     const PowerSystem& system, double tau);
/// Same rule as dcopf::hard_project, row by row; clamps pass subgradients.
ad::Var hard_project(ad::Var dispatch, const Eigen::VectorXd& total_load,
                     const PowerSystem& system, const ProjectionConfig& cfg = {});

}  // namespace batch

}  // namespace dcopf
