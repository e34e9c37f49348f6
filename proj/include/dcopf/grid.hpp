#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dcopf {

/// Generator with quadratic cost c2*p^2 + c1*p + c0. Bus indices are 0-based.
struct Generator {
  std::size_t bus = 0;
  double p_min = 0.0;  // MW
  double p_max = 0.0;  // MW
  double c2 = 0.0;     // $/MW^2
  double c1 = 0.0;     // $/MW
  double c0 = 0.0;     // $

  double range() const { return p_max - p_min; }
  double cost(double p) const { return (c2 * p + c1) * p + c0; }
  double marginal_cost(double p) const { return 2.0 * c2 * p + c1; }
};

struct Line {
  std::size_t from_bus = 0;
  std::size_t to_bus = 0;
  double reactance = 0.0;  // p.u.
  double flow_limit = std::numeric_limits<double>::infinity();  // MW

  bool limited() const { return flow_limit < std::numeric_limits<double>::infinity(); }
};

/// Generator outputs in MW, one entry per generator.
struct DispatchVector {
  Eigen::VectorXd mw;

  DispatchVector() = default;
  explicit DispatchVector(Eigen::VectorXd values) : mw(std::move(values)) {}
  Eigen::Index size() const { return mw.size(); }
  double total() const { return mw.sum(); }
};

/// Bus demands in MW, one entry per bus.
struct LoadVector {
  Eigen::VectorXd mw;

  LoadVector() = default;
  explicit LoadVector(Eigen::VectorXd values) : mw(std::move(values)) {}
  Eigen::Index size() const { return mw.size(); }
  double total() const { return mw.sum(); }
};

/// Immutable DC network: buses, lines, generators, base loads.
class PowerSystem {
 public:
  /// Validates the data and throws ModelError on any violated invariant.
  PowerSystem(std::string name, std::size_t n_buses, std::vector<Generator> generators,
              std::vector<Line> lines, Eigen::VectorXd base_load, std::size_t slack_bus);

  const std::string& name() const { return name_; }
  std::size_t n_buses() const { return n_buses_; }
  std::size_t n_generators() const { return generators_.size(); }
  std::size_t n_lines() const { return lines_.size(); }
  const std::vector<Generator>& generators() const { return generators_; }
  const std::vector<Line>& lines() const { return lines_; }
  const Eigen::VectorXd& base_load_mw() const { return base_load_; }
  LoadVector base_load() const { return LoadVector(base_load_); }
  std::size_t slack_bus() const { return slack_bus_; }

  Eigen::VectorXd p_min() const;
  Eigen::VectorXd p_max() const;
  double total_p_min() const;
  double total_p_max() const;

  /// Generator-bus incidence A_g, [n_buses x n_generators].
  Eigen::MatrixXd generator_incidence() const;

  /// True when every bus is reachable from the slack bus through lines.
  bool connected() const;

 private:
  std::string name_;
  std::size_t n_buses_;
  std::vector<Generator> generators_;
  std::vector<Line> lines_;
  Eigen::VectorXd base_load_;
  std::size_t slack_bus_;
};

/// Parses the JSON case schema documented in README.md (1-based bus numbers).
PowerSystem parse_case_json(const std::string& text, const std::string& origin = "<case>");
PowerSystem load_case_file(const std::string& path);

/// The built-in IEEE 30-bus system with the six-unit cost table.
PowerSystem build_case30();

/// Total generation cost in $.
double cost(const PowerSystem& system, const DispatchVector& dispatch);
/// dC_i/dp_i for every generator, $/MW.
Eigen::VectorXd marginal_cost(const PowerSystem& system, const DispatchVector& dispatch);

/// PTDF matrix [n_lines x n_buses] referenced to the slack bus; flows are
/// positive in the from->to direction. Throws SingularNetworkError when the
/// network is disconnected.
Eigen::MatrixXd compute_ptdf(const PowerSystem& system);
Eigen::MatrixXd compute_ptdf(std::size_t n_buses, std::span<const Line> lines,
                             std::size_t slack_bus);

/// PTDF * (A_g p_g - p_d), MW per line.
Eigen::VectorXd line_flows(const Eigen::MatrixXd& ptdf, const PowerSystem& system,
                           const DispatchVector& dispatch, const LoadVector& loads);

}  // namespace dcopf
