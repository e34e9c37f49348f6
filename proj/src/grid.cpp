#include "dcopf/grid.hpp"

#include <fstream>
#include <queue>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dcopf/error.hpp"

namespace dcopf {

extern const char* const kCase30Json;

namespace {

void require_length(Eigen::Index got, std::size_t want, const char* what) {
  if (got != static_cast<Eigen::Index>(want)) {
    throw DimensionError(std::string(what) + ": expected length " + std::to_string(want) +
                         ", got " + std::to_string(got));
  }
}

}  // namespace

PowerSystem::PowerSystem(std::string name, std::size_t n_buses, std::vector<Generator> generators,
                         std::vector<Line> lines, Eigen::VectorXd base_load, std::size_t slack_bus)
    : name_(std::move(name)),
      n_buses_(n_buses),
      generators_(std::move(generators)),
      lines_(std::move(lines)),
      base_load_(std::move(base_load)),
      slack_bus_(slack_bus) {
  if (n_buses_ == 0) throw ModelError("system has no buses");
  if (generators_.empty()) throw ModelError("system has no generators");
  if (slack_bus_ >= n_buses_) throw ModelError("slack bus index out of range");
  require_length(base_load_.size(), n_buses_, "base load");
  for (std::size_t i = 0; i < generators_.size(); ++i) {
    const auto& g = generators_[i];
    const auto tag = "generator " + std::to_string(i + 1);
    if (g.bus >= n_buses_) throw ModelError(tag + ": bus index out of range");
    if (!(g.p_min < g.p_max)) throw ModelError(tag + ": requires p_min < p_max");
    if (!(g.c2 > 0.0)) throw ModelError(tag + ": requires c2 > 0 (strictly convex cost)");
  }
  for (std::size_t k = 0; k < lines_.size(); ++k) {
    const auto& l = lines_[k];
    const auto tag = "line " + std::to_string(k + 1);
    if (l.from_bus >= n_buses_ || l.to_bus >= n_buses_) {
      throw ModelError(tag + ": bus index out of range");
    }
    if (l.from_bus == l.to_bus) throw ModelError(tag + ": from_bus equals to_bus");
    if (!(l.reactance > 0.0)) throw ModelError(tag + ": reactance must be positive");
    if (!(l.flow_limit > 0.0)) throw ModelError(tag + ": flow limit must be positive");
  }
  if ((base_load_.array() < 0.0).any()) throw ModelError("base load has negative entries");
  if (!connected()) throw ModelError("network graph is not connected");

  // Every evaluation band (70%..130% of base) must be servable.
  const double base_total = base_load_.sum();
  if (total_p_min() > 0.70 * base_total || total_p_max() < 1.30 * base_total) {
    throw ModelError("generation limits cannot serve 70%..130% of the base load");
  }
}

Eigen::VectorXd PowerSystem::p_min() const {
  Eigen::VectorXd out(generators_.size());
  for (std::size_t i = 0; i < generators_.size(); ++i) out[i] = generators_[i].p_min;
  return out;
}

Eigen::VectorXd PowerSystem::p_max() const {
  Eigen::VectorXd out(generators_.size());
  for (std::size_t i = 0; i < generators_.size(); ++i) out[i] = generators_[i].p_max;
  return out;
}

double PowerSystem::total_p_min() const { return p_min().sum(); }
double PowerSystem::total_p_max() const { return p_max().sum(); }

Eigen::MatrixXd PowerSystem::generator_incidence() const {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n_buses_, generators_.size());
  for (std::size_t i = 0; i < generators_.size(); ++i) a(generators_[i].bus, i) = 1.0;
  return a;
}

bool PowerSystem::connected() const {
  std::vector<std::vector<std::size_t>> adj(n_buses_);
  for (const auto& l : lines_) {
    adj[l.from_bus].push_back(l.to_bus);
    adj[l.to_bus].push_back(l.from_bus);
  }
  std::vector<bool> seen(n_buses_, false);
  std::queue<std::size_t> frontier;
  frontier.push(slack_bus_);
  seen[slack_bus_] = true;
  std::size_t count = 1;
  while (!frontier.empty()) {
    const auto b = frontier.front();
    frontier.pop();
    for (auto n : adj[b]) {
      if (!seen[n]) {
        seen[n] = true;
        ++count;
        frontier.push(n);
      }
    }
  }
  return count == n_buses_;
}

PowerSystem parse_case_json(const std::string& text, const std::string& origin) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ModelError(origin + ": invalid JSON: " + e.what());
  }
  try {
    const auto n_buses = doc.at("n_buses").get<std::size_t>();
    const auto slack = doc.at("slack_bus").get<std::size_t>();
    if (slack < 1) throw ModelError(origin + ": slack_bus is 1-based");

    const auto loads = doc.at("loads_mw").get<std::vector<double>>();
    Eigen::VectorXd base = Eigen::Map<const Eigen::VectorXd>(loads.data(), loads.size());

    std::vector<Line> lines;
    for (const auto& row : doc.at("lines")) {
      if (row.size() < 3) throw ModelError(origin + ": line rows are [from, to, x, limit]");
      Line l;
      l.from_bus = row.at(0).get<std::size_t>() - 1;
      l.to_bus = row.at(1).get<std::size_t>() - 1;
      l.reactance = row.at(2).get<double>();
      if (row.size() > 3 && !row.at(3).is_null()) l.flow_limit = row.at(3).get<double>();
      lines.push_back(l);
    }

    std::vector<Generator> gens;
    for (const auto& row : doc.at("generators")) {
      if (row.size() < 5) {
        throw ModelError(origin + ": generator rows are [bus, pmin, pmax, c2, c1, c0]");
      }
      Generator g;
      g.bus = row.at(0).get<std::size_t>() - 1;
      g.p_min = row.at(1).get<double>();
      g.p_max = row.at(2).get<double>();
      g.c2 = row.at(3).get<double>();
      g.c1 = row.at(4).get<double>();
      g.c0 = row.size() > 5 ? row.at(5).get<double>() : 0.0;
      gens.push_back(g);
    }
    return PowerSystem(doc.value("name", std::string("case")), n_buses, std::move(gens),
                       std::move(lines), std::move(base), slack - 1);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(origin + ": " + e.what());
  }
}

PowerSystem load_case_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open case file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_case_json(buf.str(), path);
}

PowerSystem build_case30() { return parse_case_json(kCase30Json, "builtin:ieee30"); }

double cost(const PowerSystem& system, const DispatchVector& dispatch) {
  require_length(dispatch.size(), system.n_generators(), "dispatch");
  double total = 0.0;
  for (std::size_t i = 0; i < system.n_generators(); ++i) {
    total += system.generators()[i].cost(dispatch.mw[i]);
  }
  return total;
}

Eigen::VectorXd marginal_cost(const PowerSystem& system, const DispatchVector& dispatch) {
  require_length(dispatch.size(), system.n_generators(), "dispatch");
  Eigen::VectorXd out(system.n_generators());
  for (std::size_t i = 0; i < system.n_generators(); ++i) {
    out[i] = system.generators()[i].marginal_cost(dispatch.mw[i]);
  }
  return out;
}

Eigen::MatrixXd compute_ptdf(const PowerSystem& system) {
  return compute_ptdf(system.n_buses(), system.lines(), system.slack_bus());
}

Eigen::MatrixXd compute_ptdf(std::size_t n_buses, std::span<const Line> lines,
                             std::size_t slack_bus) {
  const auto n = static_cast<Eigen::Index>(n_buses);
  const auto m = static_cast<Eigen::Index>(lines.size());
  const auto slack = static_cast<Eigen::Index>(slack_bus);
  if (slack >= n) throw ModelError("slack bus index out of range");

  // Branch-bus incidence (+1 at from, -1 at to) and nodal susceptance.
  Eigen::MatrixXd incidence = Eigen::MatrixXd::Zero(m, n);
  Eigen::VectorXd b_line(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto& l = lines[k];
    if (l.from_bus >= n_buses || l.to_bus >= n_buses) throw ModelError("line bus out of range");
    incidence(k, l.from_bus) = 1.0;
    incidence(k, l.to_bus) = -1.0;
    b_line[k] = 1.0 / l.reactance;
  }
  const Eigen::MatrixXd b_bus = incidence.transpose() * b_line.asDiagonal() * incidence;

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i != slack) keep.push_back(i);
  }
  const auto r = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd b_red(r, r);
  Eigen::MatrixXd a_red(m, r);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < r; ++j) b_red(i, j) = b_bus(keep[i], keep[j]);
    a_red.col(i) = incidence.col(keep[i]);
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(b_red);
  if (r > 0 && !lu.isInvertible()) {
    throw SingularNetworkError("reduced susceptance matrix is singular (disconnected network)");
  }

  Eigen::MatrixXd ptdf = Eigen::MatrixXd::Zero(m, n);
  if (r > 0) {
    const Eigen::MatrixXd reduced = b_line.asDiagonal() * a_red * lu.inverse();
    for (Eigen::Index i = 0; i < r; ++i) ptdf.col(keep[i]) = reduced.col(i);
  }
  return ptdf;
}

Eigen::VectorXd line_flows(const Eigen::MatrixXd& ptdf, const PowerSystem& system,
                           const DispatchVector& dispatch, const LoadVector& loads) {
  require_length(dispatch.size(), system.n_generators(), "dispatch");
  require_length(loads.size(), system.n_buses(), "loads");
  if (ptdf.rows() != static_cast<Eigen::Index>(system.n_lines()) ||
      ptdf.cols() != static_cast<Eigen::Index>(system.n_buses())) {
    throw DimensionError("ptdf shape does not match the system");
  }
  const Eigen::VectorXd injection = system.generator_incidence() * dispatch.mw - loads.mw;
  return ptdf * injection;
}

}  // namespace dcopf
