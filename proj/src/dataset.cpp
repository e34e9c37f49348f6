#include "dcopf/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "dcopf/error.hpp"
#include "dcopf/oracle.hpp"
#include "dcopf/rng.hpp"

namespace dcopf {

void ScenarioSpec::validate() const {
  if (!(scale_lo > 0.0) || !(scale_lo <= scale_hi)) {
    throw Error("scenario '" + name + "': requires 0 < scale_lo <= scale_hi");
  }
  if (n_samples == 0) throw Error("scenario '" + name + "': needs at least one sample");
}

ScenarioSpec training_scenario(std::size_t n_samples) {
  return {"train", 0.70, 1.00, n_samples};
}

std::vector<ScenarioSpec> evaluation_scenarios(std::size_t n_samples) {
  return {
      {"Very Low (70-75%)", 0.70, 0.75, n_samples},
      {"Low (83-88%)", 0.83, 0.88, n_samples},
      {"Nominal (95-100%)", 0.95, 1.00, n_samples},
      {"High (110-115%)", 1.10, 1.15, n_samples},
      {"Very High (125-130%)", 1.25, 1.30, n_samples},
  };
}

std::vector<Sample> generate(const PowerSystem& system, const ScenarioSpec& spec,
                             std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(spec.n_samples);
  for (std::size_t k = 0; k < spec.n_samples; ++k) {
    const double factor = spec.scale_lo + (spec.scale_hi - spec.scale_lo) * unit(rng);
    Sample s;
    s.loads = LoadVector(system.base_load_mw() * factor);
    const auto sol = solve_economic_dispatch(system, s.loads);
    s.optimal_dispatch = sol.dispatch;
    s.optimal_cost = sol.cost;
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::vector<std::string> header_columns(std::size_t n_buses, std::size_t n_gens) {
  std::vector<std::string> cols;
  for (std::size_t i = 1; i <= n_buses; ++i) cols.push_back("load_" + std::to_string(i));
  for (std::size_t i = 1; i <= n_gens; ++i) cols.push_back("pg_" + std::to_string(i));
  cols.emplace_back("cost");
  return cols;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void save_samples(const std::vector<Sample>& samples, const std::string& path) {
  if (samples.empty()) throw Error("refusing to write an empty dataset to " + path);
  const auto n_buses = static_cast<std::size_t>(samples.front().loads.size());
  const auto n_gens = static_cast<std::size_t>(samples.front().optimal_dispatch.size());
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset " + path);
  out.precision(17);
  const auto cols = header_columns(n_buses, n_gens);
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << "\n";
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < n_buses; ++i) out << (i ? "," : "") << s.loads.mw[i];
    for (std::size_t i = 0; i < n_gens; ++i) out << "," << s.optimal_dispatch.mw[i];
    out << "," << s.optimal_cost << "\n";
  }
  if (!out) throw Error("failed while writing dataset " + path);
}

std::vector<Sample> load_samples(const std::string& path, const PowerSystem& system,
                                 double verify_fraction) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open dataset");
  const auto n_buses = system.n_buses();
  const auto n_gens = system.n_generators();
  const auto expected = header_columns(n_buses, n_gens);

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 0, "empty file (missing header row)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  for (std::size_t c = 0; c < expected.size(); ++c) {
    if (c >= header.size()) throw ParseError(path, 1, "missing column '" + expected[c] + "'");
    if (header[c] != expected[c]) {
      throw ParseError(path, 1,
                       "column " + std::to_string(c + 1) + " is '" + header[c] +
                           "', expected '" + expected[c] + "'");
    }
  }
  if (header.size() != expected.size()) {
    throw ParseError(path, 1, "unexpected extra column '" + header[expected.size()] + "'");
  }

  std::vector<Sample> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != expected.size()) {
      throw ParseError(path, line_no,
                       "expected " + std::to_string(expected.size()) + " fields, found " +
                           std::to_string(fields.size()));
    }
    Eigen::VectorXd values(static_cast<Eigen::Index>(fields.size()));
    for (std::size_t c = 0; c < fields.size(); ++c) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(fields[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != fields[c].size() || !std::isfinite(v)) {
        throw ParseError(path, line_no,
                         "column '" + expected[c] + "': not a finite number: '" + fields[c] + "'");
      }
      values[static_cast<Eigen::Index>(c)] = v;
    }
    Sample s;
    s.loads = LoadVector(values.head(n_buses));
    s.optimal_dispatch = DispatchVector(values.segment(n_buses, n_gens));
    s.optimal_cost = values[static_cast<Eigen::Index>(n_buses + n_gens)];
    if ((s.loads.mw.array() < 0.0).any()) {
      throw ParseError(path, line_no, "negative load entry");
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ParseError(path, line_no, "no data rows");

  // Spot-check optimality on evenly spaced rows.
  const auto n_check = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(verify_fraction * static_cast<double>(out.size()))));
  const std::size_t stride = std::max<std::size_t>(1, out.size() / n_check);
  for (std::size_t r = 0; r < out.size(); r += stride) {
    const auto& s = out[r];
    const auto kkt = verify_kkt(system, s.optimal_dispatch, s.loads, 1e-9);
    const double c = cost(system, s.optimal_dispatch);
    const double scale = std::max(1.0, s.loads.total());
    if (kkt.stationarity_residual > 1e-6 || kkt.complementarity_residual > 1e-6 ||
        kkt.dual_feasibility_residual > 1e-6 || kkt.balance_residual > 1e-9 * scale ||
        std::abs(c - s.optimal_cost) > 1e-9 * std::max(1.0, std::abs(c))) {
      throw ParseError(path, r + 2, "row fails optimality re-verification");
    }
  }
  return out;
}

SampleMatrices stack(const std::vector<Sample>& samples) {
  SampleMatrices m;
  if (samples.empty()) return m;
  const auto n = static_cast<ad::Index>(samples.size());
  const auto nb = samples.front().loads.size();
  const auto ng = samples.front().optimal_dispatch.size();
  m.loads.resize(n, nb);
  m.optimal_dispatch.resize(n, ng);
  m.optimal_cost.resize(n);
  m.total_load.resize(n);
  for (ad::Index r = 0; r < n; ++r) {
    const auto& s = samples[static_cast<std::size_t>(r)];
    m.loads.row(r) = s.loads.mw.transpose();
    m.optimal_dispatch.row(r) = s.optimal_dispatch.mw.transpose();
    m.optimal_cost[r] = s.optimal_cost;
    m.total_load[r] = s.loads.total();
  }
  return m;
}

SampleMatrices stack_rows(const SampleMatrices& all, const std::vector<std::size_t>& rows) {
  SampleMatrices m;
  const auto n = static_cast<ad::Index>(rows.size());
  m.loads.resize(n, all.loads.cols());
  m.optimal_dispatch.resize(n, all.optimal_dispatch.cols());
  m.optimal_cost.resize(n);
  m.total_load.resize(n);
  for (ad::Index r = 0; r < n; ++r) {
    const auto src = static_cast<ad::Index>(rows[static_cast<std::size_t>(r)]);
    m.loads.row(r) = all.loads.row(src);
    m.optimal_dispatch.row(r) = all.optimal_dispatch.row(src);
    m.optimal_cost[r] = all.optimal_cost[src];
    m.total_load[r] = all.total_load[src];
  }
  return m;
}

}  // namespace dcopf
