#include "dcopf/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dcopf/error.hpp"
#include "dcopf/oracle.hpp"
#include "dcopf/rng.hpp"

namespace dcopf {

using nlohmann::json;

Stage1Config RunConfig::stage1() const {
  Stage1Config c;
  c.epochs = stage1_epochs;
  c.lr = stage1_lr;
  c.batch_size = stage1_batch;
  c.tau = projection.tau;
  c.near.kkt_eps = kkt_eps;
  c.feas_tol = projection.feas_tol;
  c.seed = derive_seed(seed, "stage1");
  return c;
}

Stage2Config RunConfig::stage2() const {
  Stage2Config c;
  c.epochs = stage2_epochs;
  c.lr = stage2_lr;
  c.weight_decay = stage2_weight_decay;
  c.batch_size = stage2_batch;
  c.clip_norm = clip_norm;
  c.rollout.n_steps = n_train_steps;
  c.rollout.projection = rollout_projection;
  c.rollout.proj = projection;
  c.seed = derive_seed(seed, "stage2");
  return c;
}

ScenarioSpec RunConfig::training_spec() const {
  return {"train", train_scale_lo, train_scale_hi, n_train};
}

double ScenarioResult::cost_reduction_pct() const {
  return gnn_cost_mean != 0.0 ? 100.0 * (gnn_cost_mean - cfm_cost_mean) / gnn_cost_mean : 0.0;
}

double ScenarioResult::gap_reduction_pp() const { return gnn_gap_mean - cfm_gap_mean; }

double gap_pct(double cost, double optimal_cost) {
  if (!(optimal_cost > 0.0)) throw Error("gap_pct: optimal cost must be positive");
  return 100.0 * (cost - optimal_cost) / optimal_cost;
}

EvaluationReport summarize(const std::vector<ScenarioSpec>& scenarios,
                           std::vector<SampleRecord> samples) {
  EvaluationReport report;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    ScenarioResult r;
    r.spec = scenarios[s];
    double opt_sq = 0.0;
    r.gnn_gap_worst = -std::numeric_limits<double>::infinity();
    r.cfm_gap_worst = -std::numeric_limits<double>::infinity();
    std::size_t gnn_ok = 0;
    std::size_t cfm_ok = 0;
    for (const auto& rec : samples) {
      if (rec.scenario != s) continue;
      ++r.n;
      const double g = gap_pct(rec.gnn_cost, rec.optimal_cost);
      const double c = gap_pct(rec.cfm_cost, rec.optimal_cost);
      r.optimal_cost_mean += rec.optimal_cost;
      opt_sq += rec.optimal_cost * rec.optimal_cost;
      r.gnn_cost_mean += rec.gnn_cost;
      r.cfm_cost_mean += rec.cfm_cost;
      r.gnn_gap_mean += g;
      r.cfm_gap_mean += c;
      r.gnn_gap_worst = std::max(r.gnn_gap_worst, g);
      r.cfm_gap_worst = std::max(r.cfm_gap_worst, c);
      gnn_ok += rec.gnn_feasible ? 1 : 0;
      cfm_ok += rec.cfm_feasible ? 1 : 0;
    }
    if (r.n == 0) {
      r.gnn_gap_worst = r.cfm_gap_worst = 0.0;
    } else {
      const double n = static_cast<double>(r.n);
      r.optimal_cost_mean /= n;
      r.optimal_cost_std =
          std::sqrt(std::max(0.0, opt_sq / n - r.optimal_cost_mean * r.optimal_cost_mean));
      r.gnn_cost_mean /= n;
      r.cfm_cost_mean /= n;
      r.gnn_gap_mean /= n;
      r.cfm_gap_mean /= n;
      r.gnn_feasible_pct = 100.0 * static_cast<double>(gnn_ok) / n;
      r.cfm_feasible_pct = 100.0 * static_cast<double>(cfm_ok) / n;
    }
    report.scenarios.push_back(r);
  }
  report.samples = std::move(samples);
  return report;
}

EvaluationReport evaluate_models(GnnModel& gnn, VectorField& field, const PowerSystem& system,
                                 const std::vector<ScenarioSpec>& scenarios, std::uint64_t seed,
                                 int n_eval_steps, const ProjectionConfig& proj) {
  std::vector<SampleRecord> records;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    const auto samples = generate(system, scenarios[s], derive_seed(seed, "eval", s));
    if (samples.empty()) continue;
    const SampleMatrices m = stack(samples);
    const ad::Matrix p_gnn = gnn.predict(m.loads, proj);
    const ad::Matrix p_cfm = ode_refine(field, p_gnn, m.total_load, system, n_eval_steps, true, proj);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const auto r = static_cast<ad::Index>(k);
      const DispatchVector dg(p_gnn.row(r).transpose());
      const DispatchVector dc(p_cfm.row(r).transpose());
      SampleRecord rec;
      rec.scenario = s;
      rec.total_load = m.total_load[r];
      rec.optimal_cost = samples[k].optimal_cost;
      rec.gnn_cost = cost(system, dg);
      rec.cfm_cost = cost(system, dc);
      rec.gnn_feasible = check_feasibility(dg, samples[k].loads, system, proj.feas_tol).feasible;
      rec.cfm_feasible = check_feasibility(dc, samples[k].loads, system, proj.feas_tol).feasible;
      records.push_back(rec);
    }
  }
  return summarize(scenarios, std::move(records));
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string pad(std::string s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return left ? s + fill : fill + s;
}

}  // namespace

std::string format_report(const EvaluationReport& report) {
  std::ostringstream os;
  os << "Performance summary\n";
  os << pad("Scenario", 22, true) << pad("Optimal ($)", 18) << pad("GNN ($)", 10)
     << pad("GNN gap%", 10) << pad("CFM ($)", 10) << pad("CFM gap%", 10) << pad("Feas%", 8)
     << pad("Worst%", 8) << "\n";
  for (const auto& r : report.scenarios) {
    os << pad(r.spec.name, 22, true)
       << pad(fmt("%.2f", r.optimal_cost_mean) + " +/- " + fmt("%.2f", r.optimal_cost_std), 18)
       << pad(fmt("%.2f", r.gnn_cost_mean), 10) << pad(fmt("%.2f", r.gnn_gap_mean), 10)
       << pad(fmt("%.2f", r.cfm_cost_mean), 10) << pad(fmt("%.2f", r.cfm_gap_mean), 10)
       << pad(fmt("%.1f", r.cfm_feasible_pct), 8) << pad(fmt("%.2f", r.cfm_gap_worst), 8) << "\n";
  }
  os << "\nCFM refinement improvement\n";
  os << pad("Scenario", 22, true) << pad("Cost red. %", 12) << pad("Gap red. pp", 12)
     << pad("GNN feas%", 10) << "\n";
  for (const auto& r : report.scenarios) {
    os << pad(r.spec.name, 22, true) << pad(fmt("%.2f", r.cost_reduction_pct()), 12)
       << pad(fmt("%.2f", r.gap_reduction_pp()), 12) << pad(fmt("%.1f", r.gnn_feasible_pct), 10)
       << "\n";
  }
  return os.str();
}

std::string report_to_json(const EvaluationReport& report) {
  json j;
  j["scenarios"] = json::array();
  for (const auto& r : report.scenarios) {
    j["scenarios"].push_back({
        {"name", r.spec.name},
        {"scale_lo", r.spec.scale_lo},
        {"scale_hi", r.spec.scale_hi},
        {"n", r.n},
        {"optimal_cost_mean", r.optimal_cost_mean},
        {"optimal_cost_std", r.optimal_cost_std},
        {"gnn_cost_mean", r.gnn_cost_mean},
        {"gnn_gap_mean_pct", r.gnn_gap_mean},
        {"gnn_gap_worst_pct", r.gnn_gap_worst},
        {"gnn_feasible_pct", r.gnn_feasible_pct},
        {"cfm_cost_mean", r.cfm_cost_mean},
        {"cfm_gap_mean_pct", r.cfm_gap_mean},
        {"cfm_gap_worst_pct", r.cfm_gap_worst},
        {"cfm_feasible_pct", r.cfm_feasible_pct},
        {"cost_reduction_pct", r.cost_reduction_pct()},
        {"gap_reduction_pp", r.gap_reduction_pp()},
    });
  }
  j["samples"] = json::array();
  for (const auto& s : report.samples) {
    j["samples"].push_back({
        {"scenario", s.scenario},
        {"total_load", s.total_load},
        {"optimal_cost", s.optimal_cost},
        {"gnn_cost", s.gnn_cost},
        {"cfm_cost", s.cfm_cost},
        {"gnn_feasible", s.gnn_feasible},
        {"cfm_feasible", s.cfm_feasible},
    });
  }
  return j.dump(2) + "\n";
}

EvaluationReport report_from_json(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin, 0, e.what());
  }
  try {
    std::vector<ScenarioSpec> specs;
    for (const auto& s : j.at("scenarios")) {
      specs.push_back({s.at("name").get<std::string>(), s.at("scale_lo").get<double>(),
                       s.at("scale_hi").get<double>(), s.at("n").get<std::size_t>()});
    }
    std::vector<SampleRecord> records;
    for (const auto& s : j.at("samples")) {
      SampleRecord r;
      r.scenario = s.at("scenario").get<std::size_t>();
      if (r.scenario >= specs.size()) {
        throw ParseError(origin, 0, "sample refers to unknown scenario " + std::to_string(r.scenario));
      }
      r.total_load = s.at("total_load").get<double>();
      r.optimal_cost = s.at("optimal_cost").get<double>();
      r.gnn_cost = s.at("gnn_cost").get<double>();
      r.cfm_cost = s.at("cfm_cost").get<double>();
      r.gnn_feasible = s.at("gnn_feasible").get<bool>();
      r.cfm_feasible = s.at("cfm_feasible").get<bool>();
      records.push_back(r);
    }
    return summarize(specs, std::move(records));
  } catch (const json::exception& e) {
    throw ParseError(origin, 0, e.what());
  }
}

namespace {

json terms_json(const Stage1Terms& t) {
  return {{"gap", t.gap},         {"econ", t.econ},     {"kkt_min", t.kkt_min},
          {"kkt_max", t.kkt_max}, {"balance", t.balance}, {"limits", t.limits},
          {"direct", t.direct},   {"total", t.total}};
}

}  // namespace

std::string to_json_line(const Stage1EpochLog& log) {
  const json j = {
      {"stage", 1},
      {"epoch", log.epoch},
      {"rho", log.rho},
      {"lr", log.lr},
      {"weights",
       {{"gap", log.weights.gap},
        {"econ", log.weights.econ},
        {"kkt", log.weights.kkt},
        {"balance", log.weights.balance},
        {"limits", log.weights.limits},
        {"direct", log.weights.direct}}},
      {"loss", terms_json(log.mean_terms)},
      {"mean_gap_pct", log.mean_gap_pct},
      {"feasible_fraction", log.feasible_fraction},
  };
  return j.dump();
}

std::string to_json_line(const Stage2EpochLog& log) {
  const auto& t = log.mean_terms;
  const json j = {
      {"stage", 2},
      {"epoch", log.epoch},
      {"rho", log.rho},
      {"lr", log.lr},
      {"weights",
       {{"fm", log.weights.fm},
        {"cost", log.weights.cost},
        {"improve", log.weights.improve},
        {"distance", log.weights.distance},
        {"balance", log.weights.balance},
        {"limits", log.weights.limits},
        {"delta", log.weights.delta}}},
      {"loss",
       {{"fm", t.fm},
        {"cost", t.cost},
        {"improve", t.improve},
        {"distance", t.distance},
        {"balance", t.balance},
        {"limits", t.limits},
        {"total", t.total}}},
      {"mean_gap_pct", log.mean_gap_pct},
      {"mean_grad_norm", log.mean_grad_norm},
  };
  return j.dump();
}

void save_bundle(const ModelBundle& b, const std::string& path) {
  const auto row = [](const ad::RowVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  const json j = {
      {"format", "dcopf-bundle"},
      {"version", 1},
      {"case", b.case_path},
      {"gnn", {{"hidden", b.gnn.hidden}, {"head_hidden", b.gnn.head_hidden}}},
      {"cfm",
       {{"hidden", b.cfm.hidden},
        {"blocks", b.cfm.blocks},
        {"output_init_scale", b.cfm.output_init_scale}}},
      {"load_normalizer", {{"lo", row(b.normalizer.lo())}, {"hi", row(b.normalizer.hi())}}},
      {"gnn_checkpoint", b.gnn_checkpoint},
      {"cfm_checkpoint", b.cfm_checkpoint},
  };
  std::ofstream out(path);
  if (!out) throw Error("cannot write model bundle " + path);
  out << j.dump(2) << "\n";
  if (!out) throw Error("failed while writing model bundle " + path);
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError(path, 0, "cannot open model bundle (run `dcopf train-gnn` to create one)");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    const json j = json::parse(ss.str());
    if (j.at("format").get<std::string>() != "dcopf-bundle") {
      throw ParseError(path, 0, "not a dcopf model bundle");
    }
    ModelBundle b;
    b.case_path = j.value("case", std::string());
    b.gnn.hidden = j.at("gnn").at("hidden").get<ad::Index>();
    b.gnn.head_hidden = j.at("gnn").at("head_hidden").get<ad::Index>();
    b.cfm.hidden = j.at("cfm").at("hidden").get<ad::Index>();
    b.cfm.blocks = j.at("cfm").at("blocks").get<int>();
    b.cfm.output_init_scale = j.at("cfm").at("output_init_scale").get<double>();
    const auto lo = j.at("load_normalizer").at("lo").get<std::vector<double>>();
    const auto hi = j.at("load_normalizer").at("hi").get<std::vector<double>>();
    b.normalizer = LoadNormalizer(
        Eigen::Map<const ad::RowVector>(lo.data(), static_cast<ad::Index>(lo.size())),
        Eigen::Map<const ad::RowVector>(hi.data(), static_cast<ad::Index>(hi.size())));
    b.gnn_checkpoint = j.at("gnn_checkpoint").get<std::string>();
    b.cfm_checkpoint = j.value("cfm_checkpoint", std::string());
    return b;
  } catch (const json::exception& e) {
    throw ParseError(path, 0, e.what());
  }
}

std::string bundle_relative(const std::string& bundle_path, const std::string& entry) {
  const std::filesystem::path p(entry);
  if (p.is_absolute()) return entry;
  return (std::filesystem::path(bundle_path).parent_path() / p).string();
}

PowerSystem load_system(const std::string& case_path) {
  return case_path.empty() ? build_case30() : load_case_file(case_path);
}

}  // namespace dcopf
