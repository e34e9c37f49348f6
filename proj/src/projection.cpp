#include "dcopf/projection.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dcopf/error.hpp"

namespace dcopf {

void ProjectionConfig::validate() const {
  if (!(tau > 0.0)) throw Error("projection: tau must be positive");
  if (!(hard_tol > 0.0)) throw Error("projection: hard_tol must be positive");
  if (hard_max_iters < 1) throw Error("projection: hard_max_iters must be >= 1");
  if (!(feas_tol >= 0.0)) throw Error("projection: feas_tol must be non-negative");
}

double soft_clamp(double x, double x_min, double x_max, double tau) {
  if (x_min > x_max) throw Error("soft_clamp: x_min > x_max");
  if (!(tau > 0.0)) throw Error("soft_clamp: tau must be positive");
  const double range = x_max - x_min;
  if (range == 0.0) return x_min;
  const double z = ((x - x_min) / range - 0.5) / tau;
  const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return x_min + range * s;
}

Eigen::VectorXd capacity_weights(const PowerSystem& system) {
  const Eigen::VectorXd range = system.p_max() - system.p_min();
  return range / range.sum();
}

namespace {

void require_dispatch(const DispatchVector& d, const PowerSystem& s) {
  if (d.size() != static_cast<Eigen::Index>(s.n_generators())) {
    throw DimensionError("dispatch length does not match the number of generators");
  }
}

void require_loads(const LoadVector& l, const PowerSystem& s) {
  if (l.size() != static_cast<Eigen::Index>(s.n_buses())) {
    throw DimensionError("loads length does not match the number of buses");
  }
}

DispatchVector soft_clamp_all(const DispatchVector& d, const PowerSystem& system, double tau) {
  DispatchVector out = d;
  for (std::size_t i = 0; i < system.n_generators(); ++i) {
    const auto& g = system.generators()[i];
    out.mw[i] = soft_clamp(d.mw[i], g.p_min, g.p_max, tau);
  }
  return out;
}

// Capacity weights restricted to generators that can still move in the
// direction of `imbalance`. All zeros when none can.
Eigen::VectorXd headroom_weights(const Eigen::VectorXd& p, double imbalance,
                                 const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const bool free = imbalance > 0.0 ? p[i] < hi[i] : p[i] > lo[i];
    if (free) w[i] = hi[i] - lo[i];
  }
  const double total = w.sum();
  if (total > 0.0) w /= total;
  return w;
}

void require_servable(double total_load, const PowerSystem& system) {
  const double lo = system.total_p_min();
  const double hi = system.total_p_max();
  const double slack = 1e-12 * std::max(1.0, std::abs(total_load));
  if (total_load < lo - slack) {
    throw InfeasibleLoadError(InfeasibleLoadError::Direction::kBelowMinimum, total_load, lo);
  }
  if (total_load > hi + slack) {
    throw InfeasibleLoadError(InfeasibleLoadError::Direction::kAboveMaximum, total_load, hi);
  }
}

}  // namespace

DispatchVector soft_balance_project(const DispatchVector& dispatch, const LoadVector& loads,
                                    const PowerSystem& system, double tau) {
  require_dispatch(dispatch, system);
  require_loads(loads, system);
  const double imbalance = loads.total() - dispatch.total();
  DispatchVector shifted(dispatch.mw + imbalance * capacity_weights(system));
  return soft_clamp_all(shifted, system, tau);
}

DispatchVector soft_project(const DispatchVector& dispatch, const LoadVector& loads,
                            const PowerSystem& system, double tau) {
  require_dispatch(dispatch, system);
  return soft_balance_project(soft_clamp_all(dispatch, system, tau), loads, system, tau);
}

DispatchVector hard_project(const DispatchVector& dispatch, const LoadVector& loads,
                            const PowerSystem& system, const ProjectionConfig& cfg) {
  require_loads(loads, system);
  return hard_project(dispatch, loads.total(), system, cfg);
}

DispatchVector hard_project(const DispatchVector& dispatch, double total_load,
                            const PowerSystem& system, const ProjectionConfig& cfg) {
  require_dispatch(dispatch, system);
  cfg.validate();
  require_servable(total_load, system);
  const Eigen::VectorXd lo = system.p_min();
  const Eigen::VectorXd hi = system.p_max();

  Eigen::VectorXd p = dispatch.mw.cwiseMax(lo).cwiseMin(hi);
  for (int iter = 0; iter < cfg.hard_max_iters; ++iter) {
    const double imbalance = total_load - p.sum();
    if (std::abs(imbalance) < cfg.hard_tol) return DispatchVector(p);
    const Eigen::VectorXd w = headroom_weights(p, imbalance, lo, hi);
    p = (p + imbalance * w).cwiseMax(lo).cwiseMin(hi);
  }
  const double imbalance = total_load - p.sum();
  if (std::abs(imbalance) >= cfg.hard_tol) {
    std::ostringstream os;
    os << "hard projection left an imbalance of " << imbalance << " MW after "
       << cfg.hard_max_iters << " rounds";
    throw ConvergenceError(os.str());
  }
  return DispatchVector(p);
}

std::string FeasibilityReport::describe() const {
  std::ostringstream os;
  os << (feasible ? "feasible" : "infeasible") << " (balance error " << balance_error << " MW)";
  for (const auto& v : violations) {
    os << "\n  ";
    switch (v.kind) {
      case Violation::Kind::kBelowMin:
        os << "generator " << v.index + 1 << " below p_min by " << v.magnitude << " MW";
        break;
      case Violation::Kind::kAboveMax:
        os << "generator " << v.index + 1 << " above p_max by " << v.magnitude << " MW";
        break;
      case Violation::Kind::kBalance:
        os << "power balance off by " << v.magnitude << " MW";
        break;
      case Violation::Kind::kLineFlow:
        os << "line " << v.index + 1 << " over its limit by " << v.magnitude << " MW";
        break;
    }
    if (v.informational) os << " (informational)";
  }
  return os.str();
}

FeasibilityReport check_feasibility(const DispatchVector& dispatch, const LoadVector& loads,
                                    const PowerSystem& system, double feas_tol,
                                    const Eigen::MatrixXd* ptdf) {
  require_dispatch(dispatch, system);
  require_loads(loads, system);
  FeasibilityReport r;
  for (std::size_t i = 0; i < system.n_generators(); ++i) {
    const auto& g = system.generators()[i];
    const double p = dispatch.mw[i];
    if (!std::isfinite(p)) {
      r.violations.push_back({Violation::Kind::kAboveMax, i, std::abs(p), false});
    } else if (p < g.p_min - feas_tol) {
      r.violations.push_back({Violation::Kind::kBelowMin, i, g.p_min - p, false});
    } else if (p > g.p_max + feas_tol) {
      r.violations.push_back({Violation::Kind::kAboveMax, i, p - g.p_max, false});
    }
  }
  r.balance_error = dispatch.total() - loads.total();
  if (!(std::abs(r.balance_error) <= feas_tol)) {
    r.violations.push_back({Violation::Kind::kBalance, 0, r.balance_error, false});
  }
  r.feasible = r.violations.empty();

  if (ptdf != nullptr) {
    const Eigen::VectorXd flows = line_flows(*ptdf, system, dispatch, loads);
    for (std::size_t k = 0; k < system.n_lines(); ++k) {
      const auto& line = system.lines()[k];
      if (line.limited() && std::abs(flows[k]) > line.flow_limit) {
        r.violations.push_back(
            {Violation::Kind::kLineFlow, k, std::abs(flows[k]) - line.flow_limit, true});
      }
    }
  }
  return r;
}

namespace batch {

namespace {

ad::RowVector as_row(const Eigen::VectorXd& v) { return v.transpose(); }

ad::Matrix replicate_rows(const ad::RowVector& row, ad::Index rows) {
  return row.replicate(rows, 1);
}

void require_batch(ad::Var dispatch, const Eigen::VectorXd& total_load,
                   const PowerSystem& system) {
  if (dispatch.cols() != static_cast<ad::Index>(system.n_generators())) {
    throw DimensionError("batch dispatch width does not match the number of generators");
  }
  if (total_load.size() != dispatch.rows()) {
    throw DimensionError("total_load length does not match the batch size");
  }
}

}  // namespace

ad::Var soft_clamp(ad::Var x, const ad::RowVector& lo, const ad::RowVector& hi, double tau) {
  if (!(tau > 0.0)) throw Error("soft_clamp: tau must be positive");
  ad::Tape& t = *x.tape();
  const ad::RowVector range = hi - lo;
  if ((range.array() < 0.0).any()) throw Error("soft_clamp: x_min > x_max");
  const ad::RowVector inv_range =
      range.unaryExpr([](double r) { return r > 0.0 ? 1.0 / r : 0.0; });
  const ad::Var lo_v = t.constant(ad::Matrix(lo));
  const ad::Var neg_lo = t.constant(ad::Matrix(-lo));
  const ad::Var range_v = t.constant(ad::Matrix(range));
  const ad::Var inv_v = t.constant(ad::Matrix(inv_range));
  ad::Var z = ad::mul_row(ad::add_row(x, neg_lo), inv_v);
  z = ad::scale(ad::shift(z, -0.5), 1.0 / tau);
  return ad::add_row(ad::mul_row(ad::sigmoid(z), range_v), lo_v);
}

ad::Var soft_balance_project(ad::Var dispatch, const Eigen::VectorXd& total_load,
                             const PowerSystem& system, double tau) {
  require_batch(dispatch, total_load, system);
  ad::Tape& t = *dispatch.tape();
  const ad::Index rows = dispatch.rows();
  const ad::Var load = t.constant(ad::Matrix(total_load));
  const ad::Var imbalance = ad::sub(load, ad::sum_cols(dispatch));
  const ad::Var weights =
      t.constant(replicate_rows(as_row(capacity_weights(system)), rows));
  const ad::Var shifted = ad::add(dispatch, ad::mul_col(weights, imbalance));
  return soft_clamp(shifted, as_row(system.p_min()), as_row(system.p_max()), tau);
}

ad::Var soft_project(ad::Var dispatch, const Eigen::VectorXd& total_load,
                     const PowerSystem& system, double tau) {
  require_batch(dispatch, total_load, system);
  const ad::Var clamped =
      soft_clamp(dispatch, as_row(system.p_min()), as_row(system.p_max()), tau);
  return soft_balance_project(clamped, total_load, system, tau);
}

ad::Var hard_project(ad::Var dispatch, const Eigen::VectorXd& total_load,
                     const PowerSystem& system, const ProjectionConfig& cfg) {
  require_batch(dispatch, total_load, system);
  cfg.validate();
  for (Eigen::Index b = 0; b < total_load.size(); ++b) require_servable(total_load[b], system);
  ad::Tape& t = *dispatch.tape();
  const ad::Index rows = dispatch.rows();
  const ad::Index cols = dispatch.cols();
  const Eigen::VectorXd lo = system.p_min();
  const Eigen::VectorXd hi = system.p_max();
  const ad::RowVector lo_row = as_row(lo);
  const ad::RowVector hi_row = as_row(hi);
  const ad::Var load = t.constant(ad::Matrix(total_load));

  ad::Var p = ad::clamp(dispatch, lo_row, hi_row);
  std::vector<bool> active(static_cast<std::size_t>(rows), true);
  for (int iter = 0; iter < cfg.hard_max_iters; ++iter) {
    const ad::Matrix& pv = p.value();
    ad::Matrix weights = ad::Matrix::Zero(rows, cols);
    bool any = false;
    for (ad::Index b = 0; b < rows; ++b) {
      if (!active[b]) continue;
      const double imbalance = total_load[b] - pv.row(b).sum();
      if (std::abs(imbalance) < cfg.hard_tol) {
        active[b] = false;  // converged rows stop moving, as in the scalar loop
        continue;
      }
      any = true;
      weights.row(b) = headroom_weights(pv.row(b).transpose(), imbalance, lo, hi).transpose();
    }
    if (!any) return p;
    const ad::Var imbalance = ad::sub(load, ad::sum_cols(p));
    p = ad::add(p, ad::mul_col(t.constant(std::move(weights)), imbalance));
    p = ad::clamp(p, lo_row, hi_row);
  }
  const ad::Matrix& pv = p.value();
  for (ad::Index b = 0; b < rows; ++b) {
    if (active[b] && std::abs(total_load[b] - pv.row(b).sum()) >= cfg.hard_tol) {
      throw ConvergenceError("batch hard projection did not converge for row " +
                             std::to_string(b));
    }
  }
  return p;
}

}  // namespace batch

}  // namespace dcopf
