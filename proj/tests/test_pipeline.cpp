#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dcopf/error.hpp"
#include "dcopf/oracle.hpp"
#include "dcopf/pipeline.hpp"
#include "reference.hpp"

using namespace dcopf;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dcopf_test_pipeline";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

class ZeroField : public VectorField {
 public:
  ad::Var velocity(ad::Tape& tape, ad::Var p, const Eigen::VectorXd&,
                   const Eigen::VectorXd&) override {
    return tape.constant(ad::Matrix::Zero(p.rows(), p.cols()));
  }
};

SampleRecord record(std::size_t scenario, double opt, double gnn, double cfm, bool gf, bool cf) {
  SampleRecord r;
  r.scenario = scenario;
  r.total_load = 200.0;
  r.optimal_cost = opt;
  r.gnn_cost = gnn;
  r.cfm_cost = cfm;
  r.gnn_feasible = gf;
  r.cfm_feasible = cf;
  return r;
}

std::vector<ScenarioSpec> small_scenarios() {
  return {{"low", 0.70, 0.75, 4}, {"high", 1.25, 1.30, 3}};
}

}  // namespace

TEST_CASE("optimality gap") {
  CHECK(gap_pct(110.0, 100.0) == doctest::Approx(10.0));
  CHECK(gap_pct(100.0, 100.0) == 0.0);
  CHECK(gap_pct(99.0, 100.0) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(gap_pct(1.0, 0.0), Error);
  CHECK_THROWS_AS(gap_pct(1.0, std::nan("")), Error);
}

TEST_CASE("summaries from hand-built records") {
  const std::vector<ScenarioSpec> specs{{"a", 0.7, 0.75, 2}, {"b", 0.8, 0.9, 2}, {"empty", 1, 1, 1}};
  std::vector<SampleRecord> recs{
      record(0, 100.0, 110.0, 101.0, false, true),
      record(0, 200.0, 220.0, 204.0, true, false),
      record(1, 400.0, 400.0, 400.0, true, true),
  };
  const auto rep = summarize(specs, recs);
  REQUIRE(rep.scenarios.size() == 3);
  CHECK(rep.samples.size() == 3);

  const auto& a = rep.scenarios[0];
  CHECK(a.n == 2);
  CHECK(a.optimal_cost_mean == doctest::Approx(150.0));
  CHECK(a.optimal_cost_std == doctest::Approx(50.0));
  CHECK(a.gnn_cost_mean == doctest::Approx(165.0));
  CHECK(a.gnn_gap_mean == doctest::Approx(10.0));
  CHECK(a.gnn_gap_worst == doctest::Approx(10.0));
  CHECK(a.cfm_cost_mean == doctest::Approx(152.5));
  CHECK(a.cfm_gap_mean == doctest::Approx(1.5));
  CHECK(a.cfm_gap_worst == doctest::Approx(2.0));
  CHECK(a.gnn_feasible_pct == doctest::Approx(50.0));
  CHECK(a.cfm_feasible_pct == doctest::Approx(50.0));
  CHECK(a.cost_reduction_pct() == doctest::Approx(100.0 * 12.5 / 165.0));
  CHECK(a.gap_reduction_pp() == doctest::Approx(8.5));

  const auto& b = rep.scenarios[1];
  CHECK(b.n == 1);
  CHECK(b.optimal_cost_std == 0.0);
  CHECK(b.cfm_gap_mean == 0.0);
  CHECK(b.cfm_feasible_pct == 100.0);

  const auto& e = rep.scenarios[2];
  CHECK(e.n == 0);
  CHECK(e.cfm_gap_worst == 0.0);
  CHECK(e.cfm_feasible_pct == 0.0);
}

TEST_CASE("report text and JSON") {
  const std::vector<ScenarioSpec> specs{{"Low load", 0.7, 0.75, 2}, {"Peak", 1.25, 1.3, 1}};
  const auto rep = summarize(specs, {record(0, 500.0, 550.0, 500.5, true, true),
                                     record(0, 510.0, 530.0, 511.0, false, true),
                                     record(1, 900.0, 990.0, 909.0, true, true)});
  const std::string text = format_report(rep);
  CHECK(text.find("Low load") != std::string::npos);
  CHECK(text.find("Peak") != std::string::npos);
  CHECK(text.find("505.00 +/- 5.00") != std::string::npos);
  CHECK(text.find("100.0") != std::string::npos);

  const std::string js = report_to_json(rep);
  const auto parsed = nlohmann::json::parse(js);
  CHECK(parsed.at("scenarios").size() == 2);
  CHECK(parsed.at("samples").size() == 3);

  const auto back = report_from_json(js);
  CHECK(format_report(back) == text);
  CHECK(report_to_json(back) == js);
  REQUIRE(back.samples.size() == 3);
  CHECK(back.samples[1].gnn_feasible == false);
  CHECK(back.samples[2].scenario == 1);

  CHECK_THROWS_AS(report_from_json("{", "bad.json"), ParseError);
  CHECK_THROWS_AS(report_from_json("{\"scenarios\": []}"), ParseError);
  auto broken = parsed;
  broken["samples"][0]["scenario"] = 7;
  CHECK_THROWS_AS(report_from_json(broken.dump()), ParseError);
}

TEST_CASE("epoch logs are single-line JSON") {
  Stage1EpochLog l1;
  l1.epoch = 3;
  l1.rho = 0.05;
  l1.mean_gap_pct = 1.25;
  const auto s1 = to_json_line(l1);
  CHECK(s1.find('\n') == std::string::npos);
  const auto j1 = nlohmann::json::parse(s1);
  CHECK(j1.at("stage") == 1);
  CHECK(j1.at("epoch") == 3);
  CHECK(j1.at("mean_gap_pct").get<double>() == 1.25);

  Stage2EpochLog l2;
  l2.epoch = 9;
  l2.mean_grad_norm = 0.4;
  const auto j2 = nlohmann::json::parse(to_json_line(l2));
  CHECK(j2.at("stage") == 2);
  CHECK(j2.at("epoch") == 9);
}

TEST_CASE("evaluation of untrained models") {
  const auto sys = build_case30();
  GnnModel gnn(sys, {16, 8}, 3);
  const auto train = stack(generate(sys, {"t", 0.7, 1.0, 20}, 1));
  gnn.set_normalizer(LoadNormalizer::fit(train.loads));
  VectorFieldModel field(sys, {16, 1, 0.01}, 4);

  const auto specs = small_scenarios();
  const auto rep = evaluate_models(gnn, field, sys, specs, 11, 5);
  REQUIRE(rep.scenarios.size() == 2);
  REQUIRE(rep.samples.size() == 7);
  CHECK(rep.scenarios[0].n == 4);
  CHECK(rep.scenarios[1].n == 3);

  for (const auto& r : rep.scenarios) {
    // Hard projection at the end of both paths.
    CHECK(r.gnn_feasible_pct == 100.0);
    CHECK(r.cfm_feasible_pct == 100.0);
    CHECK(std::isfinite(r.cfm_gap_mean));
    CHECK(r.cfm_gap_worst >= r.cfm_gap_mean);
    CHECK(r.gnn_gap_worst >= r.gnn_gap_mean);
    CHECK(r.gnn_gap_mean >= -1e-6);
  }
  for (const auto& s : rep.samples) {
    const auto& spec = specs[s.scenario];
    const double base = sys.base_load_mw().sum();
    CHECK(s.total_load >= spec.scale_lo * base * (1 - 1e-12));
    CHECK(s.total_load <= spec.scale_hi * base * (1 + 1e-12));
    CHECK(s.optimal_cost ==
          doctest::Approx(ref::enumerate_dispatch(sys.generators(), s.total_load).cost).epsilon(1e-10));
  }

  // Same seed, same report; another seed draws other loads.
  CHECK(report_to_json(evaluate_models(gnn, field, sys, specs, 11, 5)) == report_to_json(rep));
  CHECK(report_to_json(evaluate_models(gnn, field, sys, specs, 12, 5)) != report_to_json(rep));
}

TEST_CASE("a zero field leaves the GNN dispatch in place") {
  const auto sys = build_case30();
  GnnModel gnn(sys, {16, 8}, 5);
  gnn.set_normalizer(LoadNormalizer::fit(stack(generate(sys, {"t", 0.7, 1.0, 20}, 1)).loads));
  ZeroField zero;
  const auto rep = evaluate_models(gnn, zero, sys, small_scenarios(), 2, 10);
  for (const auto& s : rep.samples) {
    CHECK(s.cfm_cost == doctest::Approx(s.gnn_cost).epsilon(1e-9));
  }
}

TEST_CASE("model bundle round trip") {
  ModelBundle b;
  b.case_path = "/some/case.json";
  b.gnn = {32, 16};
  b.cfm = {64, 2, 0.02};
  ad::RowVector lo(3), hi(3);
  lo << 0.0, 1.5, 2.0;
  hi << 0.0, 3.5, 9.25;
  b.normalizer = LoadNormalizer(lo, hi);
  b.gnn_checkpoint = "gnn.ckpt";
  b.cfm_checkpoint = "";
  const auto path = temp_file("bundle.json");
  save_bundle(b, path.string());
  const auto back = load_bundle(path.string());
  CHECK(back.case_path == b.case_path);
  CHECK(back.gnn.hidden == 32);
  CHECK(back.gnn.head_hidden == 16);
  CHECK(back.cfm.hidden == 64);
  CHECK(back.cfm.blocks == 2);
  CHECK(back.cfm.output_init_scale == 0.02);
  CHECK(back.normalizer.lo() == lo);
  CHECK(back.normalizer.hi() == hi);
  CHECK(back.gnn_checkpoint == "gnn.ckpt");
  CHECK(back.cfm_checkpoint.empty());

  CHECK(bundle_relative("/runs/a/bundle.json", "gnn.ckpt") == "/runs/a/gnn.ckpt");
  CHECK(bundle_relative("/runs/a/bundle.json", "/abs/gnn.ckpt") == "/abs/gnn.ckpt");

  CHECK_THROWS_AS(load_bundle("/nonexistent/bundle.json"), ParseError);
  const auto bad = temp_file("bad_bundle.json");
  write_text(bad, "{\"format\": \"something\"}");
  CHECK_THROWS_AS(load_bundle(bad.string()), ParseError);
  write_text(bad, "not json");
  CHECK_THROWS_AS(load_bundle(bad.string()), ParseError);
}

TEST_CASE("run configuration defaults") {
  const RunConfig rc;
  CHECK(rc.case_path.empty());
  CHECK(rc.n_train == 20000);
  CHECK(rc.stage1_epochs == 40);
  CHECK(rc.stage1_lr == 1e-3);
  CHECK(rc.stage1_batch == 256);
  CHECK(rc.stage2_epochs == 100);
  CHECK(rc.stage2_lr == 3e-3);
  CHECK(rc.stage2_weight_decay == 1e-5);
  CHECK(rc.n_train_steps == 20);
  CHECK(rc.n_eval_steps == 30);
  CHECK(rc.clip_norm == 0.5);
  CHECK(rc.eval_samples == 100);
  CHECK(rc.projection.tau == 0.05);
  CHECK(rc.projection.feas_tol == 0.1);

  const auto s1 = rc.stage1();
  CHECK(s1.epochs == 40);
  CHECK(s1.batch_size == 256);
  const auto s2 = rc.stage2();
  CHECK(s2.epochs == 100);
  CHECK(s2.rollout.n_steps == 20);
  CHECK(s2.clip_norm == 0.5);
  CHECK(s1.seed != s2.seed);
  const auto spec = rc.training_spec();
  CHECK(spec.scale_lo == 0.70);
  CHECK(spec.scale_hi == 1.00);
  CHECK(spec.n_samples == 20000);
}

TEST_CASE("system loading") {
  CHECK(load_system("").n_buses() == 30);
  const auto p = temp_file("two_bus.json");
  write_text(p, R"({"name": "two", "n_buses": 2, "slack_bus": 1, "loads_mw": [0, 100],
    "lines": [[1, 2, 0.1, null]],
    "generators": [[1, 0, 200, 0.01, 2, 0], [2, 0, 200, 0.02, 1, 0]]})");
  CHECK(load_system(p.string()).n_buses() == 2);
  CHECK_THROWS(load_system("/nonexistent/case.json"));
}
