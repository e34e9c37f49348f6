#pragma once

#include <span>

#include <Eigen/Dense>

#include "dcopf/grid.hpp"

namespace dcopf {

/// First-order optimality certificate for a dispatch.
struct KKTReport {
  double lambda = 0.0;           // system marginal price, $/MW
  Eigen::VectorXd mu_min;        // >= 0, $/MW
  Eigen::VectorXd mu_max;        // >= 0, $/MW
  double stationarity_residual = 0.0;
  double complementarity_residual = 0.0;
  /// Largest negative multiplier that stationarity would have demanded.
  double dual_feasibility_residual = 0.0;
  double balance_residual = 0.0;  // MW

  double max_residual() const;
};

struct OracleSolution {
  DispatchVector dispatch;
  double cost = 0.0;
  KKTReport kkt;
};

struct OracleOptions {
  double balance_tol = 1e-10;  // MW
  int max_iterations = 200;
};

/// Dispatch of every generator at system price `lambda`:
/// clamp((lambda - c1) / (2 c2), p_min, p_max).
Eigen::VectorXd dispatch_at_price(std::span<const Generator> generators, double lambda);

/// Exact economic dispatch (box limits + power balance) by bisection on the
/// system price. The clamp is continuous in lambda, so generators entering or
/// leaving a bound need no tie-breaking. Throws InfeasibleLoadError when the
/// total load is outside [sum p_min, sum p_max].
OracleSolution solve_economic_dispatch(std::span<const Generator> generators, double total_load,
                                       const OracleOptions& options = {});
OracleSolution solve_economic_dispatch(const PowerSystem& system, const LoadVector& loads,
                                       const OracleOptions& options = {});

/// Certifies `dispatch` against the KKT system. Generators within `tol` of a
/// bound are treated as bound. Reports, never throws, for violating inputs.
KKTReport verify_kkt(std::span<const Generator> generators, const Eigen::VectorXd& dispatch,
                     double total_load, double tol = 1e-9);
KKTReport verify_kkt(const PowerSystem& system, const DispatchVector& dispatch,
                     const LoadVector& loads, double tol = 1e-9);

}  // namespace dcopf
