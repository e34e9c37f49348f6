// Command-line front end: data generation, two-stage training, solving and
// evaluation. Every option can also come from a TOML/INI file via --config.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "dcopf/cfm.hpp"
#include "dcopf/dataset.hpp"
#include "dcopf/error.hpp"
#include "dcopf/gnn.hpp"
#include "dcopf/optim.hpp"
#include "dcopf/oracle.hpp"
#include "dcopf/pipeline.hpp"
#include "dcopf/rng.hpp"

namespace fs = std::filesystem;
using namespace dcopf;

namespace {

struct Models {
  PowerSystem system;
  ModelBundle bundle;
  GnnModel gnn;
  std::unique_ptr<VectorFieldModel> cfm;
};

Models load_models(const std::string& bundle_path, bool need_cfm) {
  ModelBundle b = load_bundle(bundle_path);
  PowerSystem system = load_system(b.case_path);
  GnnModel gnn(system, b.gnn, 0);
  ad::load_checkpoint(gnn.parameters(), bundle_relative(bundle_path, b.gnn_checkpoint));
  gnn.set_normalizer(b.normalizer);
  std::unique_ptr<VectorFieldModel> cfm;
  if (!b.cfm_checkpoint.empty()) {
    cfm = std::make_unique<VectorFieldModel>(system, b.cfm, 0);
    ad::load_checkpoint(cfm->parameters(), bundle_relative(bundle_path, b.cfm_checkpoint));
  } else if (need_cfm) {
    throw Error("bundle " + bundle_path +
                " has no Stage-2 checkpoint; run `dcopf train-cfm --bundle " + bundle_path +
                "` first");
  }
  return {std::move(system), std::move(b), std::move(gnn), std::move(cfm)};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

/// Bus loads in MW separated by whitespace, commas or newlines; '#' starts a comment.
LoadVector read_loads(const std::string& path, std::size_t n_buses) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open load file");
  std::vector<double> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    for (char& c : line) {
      if (c == ',' || c == ';') c = ' ';
    }
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || !std::isfinite(v) || v < 0.0) {
        throw ParseError(path, line_no, "not a non-negative load value: '" + tok + "'");
      }
      values.push_back(v);
    }
  }
  if (values.size() != n_buses) {
    throw ParseError(path, line_no,
                     "expected " + std::to_string(n_buses) + " bus loads, found " +
                         std::to_string(values.size()));
  }
  return LoadVector(Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(n_buses)));
}

void print_dispatch(const char* label, const PowerSystem& system, const DispatchVector& p,
                    const LoadVector& loads, double optimal_cost) {
  const double c = cost(system, p);
  std::printf("%s\n", label);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    std::printf("  pg_%ld = %.4f MW\n", static_cast<long>(i + 1), p.mw[i]);
  }
  std::printf("  cost = %.4f $ (gap %.4f %%)\n", c, gap_pct(c, optimal_cost));
  const auto report = check_feasibility(p, loads, system, 0.1);
  std::printf("  feasible at 0.1 MW: %s\n", report.feasible ? "yes" : "no");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage learned DC optimal power flow"};
  app.set_config("--config", "", "TOML/INI file supplying option values");
  app.require_subcommand(1);
  RunConfig rc;
  app.add_option("--case", rc.case_path, "Case file (JSON); default is the built-in IEEE 30-bus case");

  // generate
  auto* gen = app.add_subcommand("generate", "Sample load scenarios and solve them exactly");
  double scale_lo = 0.70, scale_hi = 1.00;
  std::size_t n_samples = 20000;
  std::uint64_t gen_seed = 42;
  std::string gen_out = "train.csv";
  gen->add_option("--scale-lo", scale_lo, "Lower load multiplier")->capture_default_str();
  gen->add_option("--scale-hi", scale_hi, "Upper load multiplier")->capture_default_str();
  gen->add_option("--n", n_samples, "Number of samples")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Random seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output CSV")->capture_default_str();

  // train-gnn
  auto* tg = app.add_subcommand("train-gnn", "Stage 1: train the graph network");
  std::string data_path = "train.csv";
  std::string out_dir = "run";
  tg->add_option("--data", data_path, "Training CSV from `generate`")->capture_default_str();
  tg->add_option("--out-dir", out_dir, "Directory for checkpoint, bundle and log")
      ->capture_default_str();
  tg->add_option("--epochs", rc.stage1_epochs)->capture_default_str();
  tg->add_option("--lr", rc.stage1_lr)->capture_default_str();
  tg->add_option("--batch", rc.stage1_batch)->capture_default_str();
  tg->add_option("--kkt-eps", rc.kkt_eps, "Near-bound threshold, MW")->capture_default_str();
  tg->add_option("--seed", rc.seed)->capture_default_str();

  // train-cfm
  auto* tc = app.add_subcommand("train-cfm", "Stage 2: train the flow-matching refiner");
  std::string bundle_path = "run/bundle.json";
  std::string rollout = "hard";
  tc->add_option("--bundle", bundle_path, "Bundle written by train-gnn")->capture_default_str();
  tc->add_option("--data", data_path, "Training CSV")->capture_default_str();
  tc->add_option("--epochs", rc.stage2_epochs)->capture_default_str();
  tc->add_option("--lr", rc.stage2_lr)->capture_default_str();
  tc->add_option("--weight-decay", rc.stage2_weight_decay)->capture_default_str();
  tc->add_option("--batch", rc.stage2_batch)->capture_default_str();
  tc->add_option("--steps", rc.n_train_steps, "Euler steps in training rollouts")
      ->capture_default_str();
  tc->add_option("--clip", rc.clip_norm, "Gradient-norm clip")->capture_default_str();
  tc->add_option("--rollout-projection", rollout, "none | soft | hard")->capture_default_str();
  tc->add_option("--seed", rc.seed)->capture_default_str();

  // solve
  auto* sv = app.add_subcommand("solve", "Exact dispatch for one load vector");
  std::string loads_path;
  double solve_scale = 1.0;
  std::string solve_bundle;
  sv->add_option("--loads", loads_path, "File with one load per bus (MW)");
  sv->add_option("--scale", solve_scale, "Multiplier on the base load when --loads is absent")
      ->capture_default_str();
  sv->add_option("--bundle", solve_bundle, "Also report the learned models' dispatch");
  sv->add_option("--steps", rc.n_eval_steps, "Euler steps for the refiner")->capture_default_str();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Five-scenario evaluation of trained models");
  std::string eval_out = "eval";
  std::uint64_t eval_seed = 7;
  ev->add_option("--bundle", bundle_path)->capture_default_str();
  ev->add_option("--out-dir", eval_out, "Writes report.txt and metrics.json")
      ->capture_default_str();
  ev->add_option("--samples", rc.eval_samples, "Samples per scenario")->capture_default_str();
  ev->add_option("--steps", rc.n_eval_steps, "Euler steps")->capture_default_str();
  ev->add_option("--seed", eval_seed)->capture_default_str();

  // report
  auto* rp = app.add_subcommand("report", "Re-summarise a metrics file from `evaluate`");
  std::string metrics_path = "eval/metrics.json";
  rp->add_option("--metrics", metrics_path)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const PowerSystem system = load_system(rc.case_path);
      const ScenarioSpec spec{"generate", scale_lo, scale_hi, n_samples};
      const auto samples = generate(system, spec, gen_seed);
      save_samples(samples, gen_out);
      std::printf("wrote %zu samples to %s\n", samples.size(), gen_out.c_str());
    } else if (*tg) {
      const PowerSystem system = load_system(rc.case_path);
      const auto data = stack(load_samples(data_path, system));
      fs::create_directories(out_dir);
      GnnModel gnn(system, {}, derive_seed(rc.seed, "gnn"));
      std::ofstream log(fs::path(out_dir) / "stage1_log.jsonl");
      Stage1Config cfg = rc.stage1();
      cfg.on_epoch = [&](const Stage1EpochLog& l) {
        const std::string line = to_json_line(l);
        log << line << "\n" << std::flush;
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
      };
      train_stage1(gnn, data, cfg);
      ad::save_checkpoint(gnn.parameters(), (fs::path(out_dir) / "gnn.ckpt").string());
      ModelBundle b;
      b.case_path = rc.case_path.empty() ? "" : fs::absolute(rc.case_path).string();
      b.gnn = gnn.config();
      b.normalizer = gnn.normalizer();
      b.gnn_checkpoint = "gnn.ckpt";
      const std::string path = (fs::path(out_dir) / "bundle.json").string();
      save_bundle(b, path);
      std::printf("wrote %s\n", path.c_str());
    } else if (*tc) {
      Models m = load_models(bundle_path, false);
      const auto data = stack(load_samples(data_path, m.system));
      rc.rollout_projection = parse_rollout_projection(rollout);
      VectorFieldModel cfm(m.system, m.bundle.cfm, derive_seed(rc.seed, "cfm"));
      const fs::path dir = fs::path(bundle_path).parent_path();
      std::ofstream log(dir / "stage2_log.jsonl");
      Stage2Config cfg = rc.stage2();
      cfg.on_epoch = [&](const Stage2EpochLog& l) {
        const std::string line = to_json_line(l);
        log << line << "\n" << std::flush;
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
      };
      train_stage2(cfm, m.gnn, data, cfg);
      ad::save_checkpoint(cfm.parameters(), (dir / "cfm.ckpt").string());
      m.bundle.cfm_checkpoint = "cfm.ckpt";
      save_bundle(m.bundle, bundle_path);
      std::printf("updated %s\n", bundle_path.c_str());
    } else if (*sv) {
      std::unique_ptr<Models> m;
      if (!solve_bundle.empty()) m = std::make_unique<Models>(load_models(solve_bundle, true));
      const PowerSystem system = m ? m->system : load_system(rc.case_path);
      const LoadVector loads = loads_path.empty()
                                   ? LoadVector(system.base_load_mw() * solve_scale)
                                   : read_loads(loads_path, system.n_buses());
      const auto sol = solve_economic_dispatch(system, loads);
      std::printf("total load = %.4f MW\n", loads.total());
      print_dispatch("oracle dispatch", system, sol.dispatch, loads, sol.cost);
      std::printf("  lambda = %.6f $/MW\n", sol.kkt.lambda);
      std::printf("  KKT residuals: stationarity %.3e, complementarity %.3e, dual %.3e, balance %.3e MW\n",
                  sol.kkt.stationarity_residual, sol.kkt.complementarity_residual,
                  sol.kkt.dual_feasibility_residual, sol.kkt.balance_residual);
      if (m) {
        const DispatchVector p0 = m->gnn.predict(loads);
        print_dispatch("GNN dispatch", system, p0, loads, sol.cost);
        const DispatchVector p1 = ode_refine(*m->cfm, p0, loads, system, rc.n_eval_steps, true);
        print_dispatch("CFM-refined dispatch", system, p1, loads, sol.cost);
      }
    } else if (*ev) {
      Models m = load_models(bundle_path, true);
      const auto report = evaluate_models(m.gnn, *m.cfm, m.system,
                                          evaluation_scenarios(rc.eval_samples), eval_seed,
                                          rc.n_eval_steps, rc.projection);
      fs::create_directories(eval_out);
      const std::string table = format_report(report);
      write_file((fs::path(eval_out) / "report.txt").string(), table);
      write_file((fs::path(eval_out) / "metrics.json").string(), report_to_json(report));
      std::printf("%s", table.c_str());
    } else if (*rp) {
      const auto report = report_from_json(read_file(metrics_path), metrics_path);
      std::printf("%s", format_report(report).c_str());
    }
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
