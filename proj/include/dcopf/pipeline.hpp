#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcopf/cfm.hpp"
#include "dcopf/dataset.hpp"
#include "dcopf/gnn.hpp"
#include "dcopf/grid.hpp"
#include "dcopf/projection.hpp"

namespace dcopf {

/// Every knob of a two-stage run. Defaults reproduce the reference setup.
struct RunConfig {
  std::string case_path;  // empty: built-in IEEE 30-bus case
  std::uint64_t seed = 42;

  std::size_t n_train = 20000;
  double train_scale_lo = 0.70;
  double train_scale_hi = 1.00;

  int stage1_epochs = 40;
  double stage1_lr = 1e-3;
  std::size_t stage1_batch = 256;
  double kkt_eps = 0.5;

  int stage2_epochs = 100;
  double stage2_lr = 3e-3;
  double stage2_weight_decay = 1e-5;
  std::size_t stage2_batch = 256;
  int n_train_steps = 20;
  int n_eval_steps = 30;
  double clip_norm = 0.5;
  RolloutProjection rollout_projection = RolloutProjection::kHard;

  ProjectionConfig projection;
  std::size_t eval_samples = 100;

  Stage1Config stage1() const;
  Stage2Config stage2() const;
  ScenarioSpec training_spec() const;
};

/// Per-sample evaluation outcome; costs in $.
struct SampleRecord {
  std::size_t scenario = 0;
  double total_load = 0.0;
  double optimal_cost = 0.0;
  double gnn_cost = 0.0;
  double cfm_cost = 0.0;
  bool gnn_feasible = false;
  bool cfm_feasible = false;
};

struct ScenarioResult {
  ScenarioSpec spec;
  std::size_t n = 0;
  double optimal_cost_mean = 0.0;
  double optimal_cost_std = 0.0;  // population
  double gnn_cost_mean = 0.0;
  double gnn_gap_mean = 0.0;  // %
  double gnn_gap_worst = 0.0;
  double gnn_feasible_pct = 0.0;
  double cfm_cost_mean = 0.0;
  double cfm_gap_mean = 0.0;
  double cfm_gap_worst = 0.0;
  double cfm_feasible_pct = 0.0;

  double cost_reduction_pct() const;  // CFM mean cost relative to GNN mean cost
  double gap_reduction_pp() const;    // GNN gap - CFM gap, percentage points
};

struct EvaluationReport {
  std::vector<ScenarioResult> scenarios;
  std::vector<SampleRecord> samples;
};

/// 100 * (cost - optimal) / optimal.
double gap_pct(double cost, double optimal_cost);

/// Aggregates per-sample records into per-scenario rows.
EvaluationReport summarize(const std::vector<ScenarioSpec>& scenarios,
                           std::vector<SampleRecord> samples);

/// Oracle, GNN-only (soft then hard projection) and CFM refinement (Euler,
/// hard projection after every step) on fresh samples of every scenario.
EvaluationReport evaluate_models(GnnModel& gnn, VectorField& field, const PowerSystem& system,
                                 const std::vector<ScenarioSpec>& scenarios, std::uint64_t seed,
                                 int n_eval_steps = 30, const ProjectionConfig& proj = {});

/// Human-readable summary and improvement tables.
std::string format_report(const EvaluationReport& report);
/// Machine-readable report: scenario rows plus every sample record.
std::string report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const std::string& text, const std::string& origin = "<report>");

std::string to_json_line(const Stage1EpochLog& log);
std::string to_json_line(const Stage2EpochLog& log);

/// Everything needed to rebuild trained models: architecture, normaliser
/// statistics and the two checkpoint files (paths relative to the bundle).
struct ModelBundle {
  std::string case_path;  // empty: built-in case
  GnnConfig gnn;
  VectorFieldConfig cfm;
  LoadNormalizer normalizer;
  std::string gnn_checkpoint;
  std::string cfm_checkpoint;  // empty until Stage 2 has run
};

void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);
/// Resolves a checkpoint path stored in a bundle against the bundle's directory.
std::string bundle_relative(const std::string& bundle_path, const std::string& entry);

/// Built-in case when `case_path` is empty.
PowerSystem load_system(const std::string& case_path);

}  // namespace dcopf
