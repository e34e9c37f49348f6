#include "dcopf/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dcopf/error.hpp"

namespace dcopf {

double KKTReport::max_residual() const {
  return std::max({stationarity_residual, complementarity_residual, dual_feasibility_residual,
                   balance_residual});
}

Eigen::VectorXd dispatch_at_price(std::span<const Generator> generators, double lambda) {
  Eigen::VectorXd p(generators.size());
  for (std::size_t i = 0; i < generators.size(); ++i) {
    const auto& g = generators[i];
    p[i] = std::clamp((lambda - g.c1) / (2.0 * g.c2), g.p_min, g.p_max);
  }
  return p;
}

namespace {

double generation_cost(std::span<const Generator> generators, const Eigen::VectorXd& p) {
  double total = 0.0;
  for (std::size_t i = 0; i < generators.size(); ++i) total += generators[i].cost(p[i]);
  return total;
}

// Price bracket containing every possible optimal lambda.
std::pair<double, double> price_bracket(std::span<const Generator> generators) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& g : generators) {
    lo = std::min(lo, g.marginal_cost(g.p_min));
    hi = std::max(hi, g.marginal_cost(g.p_max));
  }
  return {lo, hi};
}

Eigen::VectorXd bound_vector(std::span<const Generator> generators, bool upper) {
  Eigen::VectorXd p(static_cast<Eigen::Index>(generators.size()));
  for (std::size_t i = 0; i < generators.size(); ++i) {
    p[static_cast<Eigen::Index>(i)] = upper ? generators[i].p_max : generators[i].p_min;
  }
  return p;
}

}  // namespace

OracleSolution solve_economic_dispatch(std::span<const Generator> generators, double total_load,
                                       const OracleOptions& options) {
  if (generators.empty()) throw ModelError("no generators");
  double sum_min = 0.0;
  double sum_max = 0.0;
  for (const auto& g : generators) {
    sum_min += g.p_min;
    sum_max += g.p_max;
  }
  const double slack = 1e-12 * std::max(1.0, std::abs(total_load));
  if (total_load < sum_min - slack) {
    throw InfeasibleLoadError(InfeasibleLoadError::Direction::kBelowMinimum, total_load, sum_min);
  }
  if (total_load > sum_max + slack) {
    throw InfeasibleLoadError(InfeasibleLoadError::Direction::kAboveMaximum, total_load, sum_max);
  }

  auto [lo, hi] = price_bracket(generators);
  Eigen::VectorXd p;
  double lambda = lo;
  if (total_load <= sum_min) {
    // Exact bounds; the price formula can land an ulp off them.
    p = bound_vector(generators, false);
  } else if (total_load >= sum_max) {
    lambda = hi;
    p = bound_vector(generators, true);
  } else {
    bool converged = false;
    for (int it = 0; it < options.max_iterations; ++it) {
      lambda = 0.5 * (lo + hi);
      p = dispatch_at_price(generators, lambda);
      const double residual = p.sum() - total_load;
      if (std::abs(residual) < options.balance_tol) {
        converged = true;
        break;
      }
      if (residual < 0.0) {
        lo = lambda;
      } else {
        hi = lambda;
      }
    }
    if (!converged) {
      throw ConvergenceError("price bisection did not balance within " +
                             std::to_string(options.max_iterations) + " iterations");
    }
  }

  OracleSolution out;
  out.dispatch = DispatchVector(p);
  out.cost = generation_cost(generators, p);
  out.kkt = verify_kkt(generators, p, total_load);
  return out;
}

OracleSolution solve_economic_dispatch(const PowerSystem& system, const LoadVector& loads,
                                       const OracleOptions& options) {
  if (loads.size() != static_cast<Eigen::Index>(system.n_buses())) {
    throw DimensionError("loads length does not match the number of buses");
  }
  return solve_economic_dispatch(system.generators(), loads.total(), options);
}

KKTReport verify_kkt(std::span<const Generator> generators, const Eigen::VectorXd& dispatch,
                     double total_load, double tol) {
  const auto n = generators.size();
  if (dispatch.size() != static_cast<Eigen::Index>(n)) {
    throw DimensionError("dispatch length does not match the number of generators");
  }

  enum class State { kInterior, kAtMin, kAtMax };
  std::vector<State> state(n, State::kInterior);
  Eigen::VectorXd marginal(n);
  double interior_sum = 0.0;
  int interior_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = generators[i];
    marginal[i] = g.marginal_cost(dispatch[i]);
    if (std::abs(dispatch[i] - g.p_min) <= tol) {
      state[i] = State::kAtMin;
    } else if (std::abs(g.p_max - dispatch[i]) <= tol) {
      state[i] = State::kAtMax;
    } else {
      interior_sum += marginal[i];
      ++interior_count;
    }
  }

  KKTReport r;
  if (interior_count > 0) {
    r.lambda = interior_sum / interior_count;
  } else {
    // Bound generators only: lambda must lie above every at-max marginal cost
    // and below every at-min one. Take the midpoint of that interval.
    auto [lower, upper] = price_bracket(generators);
    for (std::size_t i = 0; i < n; ++i) {
      if (state[i] == State::kAtMax) lower = std::max(lower, marginal[i]);
      if (state[i] == State::kAtMin) upper = std::min(upper, marginal[i]);
    }
    r.lambda = 0.5 * (lower + upper);
  }

  r.mu_min = Eigen::VectorXd::Zero(n);
  r.mu_max = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = generators[i];
    // Stationarity: marginal - lambda + mu_max - mu_min = 0.
    const double gap = marginal[i] - r.lambda;
    double dual_violation = 0.0;
    switch (state[i]) {
      case State::kInterior:
        break;
      case State::kAtMin:
        r.mu_min[i] = std::max(0.0, gap);
        dual_violation = std::max(0.0, -gap);
        break;
      case State::kAtMax:
        r.mu_max[i] = std::max(0.0, -gap);
        dual_violation = std::max(0.0, gap);
        break;
    }
    const double stationarity = std::abs(gap + r.mu_max[i] - r.mu_min[i]);
    r.stationarity_residual = std::max(r.stationarity_residual, stationarity);
    r.dual_feasibility_residual = std::max(r.dual_feasibility_residual, dual_violation);
    r.complementarity_residual =
        std::max({r.complementarity_residual, std::abs(r.mu_min[i] * (dispatch[i] - g.p_min)),
                  std::abs(r.mu_max[i] * (g.p_max - dispatch[i]))});
  }
  r.balance_residual = std::abs(dispatch.sum() - total_load);
  return r;
}

KKTReport verify_kkt(const PowerSystem& system, const DispatchVector& dispatch,
                     const LoadVector& loads, double tol) {
  return verify_kkt(system.generators(), dispatch.mw, loads.total(), tol);
}

}  // namespace dcopf
