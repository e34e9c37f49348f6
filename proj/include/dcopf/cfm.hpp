#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcopf/autodiff.hpp"
#include "dcopf/dataset.hpp"
#include "dcopf/gnn.hpp"
#include "dcopf/grid.hpp"
#include "dcopf/projection.hpp"

namespace dcopf {

inline constexpr int kTimeFrequencies = 32;
inline constexpr int kTimeEmbedDim = 2 * kTimeFrequencies;

/// [sin(2^k pi t) for k = 0..31, cos(2^k pi t) for k = 0..31]. Throws for t
/// outside [0, 1].
ad::RowVector time_embed(double t);
/// One embedding row per entry of `t`.
ad::Matrix time_embed(const Eigen::VectorXd& t);

/// (1 - t) p0 + t p1, with t one entry per row.
ad::Matrix interpolate(const ad::Matrix& p0, const ad::Matrix& p1, const Eigen::VectorXd& t);
/// Constant velocity of the straight path, p1 - p0.
ad::Matrix path_velocity(const ad::Matrix& p0, const ad::Matrix& p1);

/// Time-dependent velocity field over dispatches (rows = samples, MW per unit time).
class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual ad::Var velocity(ad::Tape& tape, ad::Var p, const Eigen::VectorXd& t,
                           const Eigen::VectorXd& total_load) = 0;
};

struct VectorFieldConfig {
  ad::Index hidden = 256;
  int blocks = 3;
  double output_init_scale = 0.01;  // shrinks the last layer so training starts near v = 0
};

/// Input [p_norm, time_embed(t), P_total / sum p_max] -> Linear -> residual
/// blocks h + W2 silu(W1 silu(LN h)) -> LN -> SiLU -> Linear, times (p_max - p_min).
class VectorFieldModel : public VectorField {
 public:
  VectorFieldModel(const PowerSystem& system, VectorFieldConfig config, std::uint64_t seed);

  ad::Var velocity(ad::Tape& tape, ad::Var p, const Eigen::VectorXd& t,
                   const Eigen::VectorXd& total_load) override;

  ad::ParameterStore& parameters() { return params_; }
  const ad::ParameterStore& parameters() const { return params_; }
  const VectorFieldConfig& config() const { return config_; }

 private:
  VectorFieldConfig config_;
  ad::RowVector p_min_;
  ad::RowVector range_;
  double p_max_total_;
  ad::ParameterStore params_;
};

/// Batch mean over rows of ||v(p_t, t) - (p1 - p0)||^2 with p_t on the straight path.
ad::Var fm_loss(ad::Tape& tape, VectorField& field, const ad::Matrix& p0, const ad::Matrix& p1,
                const Eigen::VectorXd& t, const Eigen::VectorXd& total_load);

enum class RolloutProjection { kNone, kSoft, kHard };
std::string to_string(RolloutProjection mode);
RolloutProjection parse_rollout_projection(const std::string& text);

/// Differentiable Euler rollout from t = 0 to 1 in n_steps, projecting after
/// each step as requested.
ad::Var rollout(ad::Tape& tape, VectorField& field, ad::Var p0, const Eigen::VectorXd& total_load,
                const PowerSystem& system, int n_steps, RolloutProjection mode,
                const ProjectionConfig& proj = {});

/// Called after each Euler step with (step index 1..N, state).
using StepObserver = std::function<void(int, const ad::Matrix&)>;

/// Inference rollout: Euler with dt = 1/N, hard projection after every step
/// when `project_each_step`.
ad::Matrix ode_refine(VectorField& field, const ad::Matrix& p0, const Eigen::VectorXd& total_load,
                      const PowerSystem& system, int n_steps, bool project_each_step,
                      const ProjectionConfig& proj = {}, const StepObserver& observer = {});
DispatchVector ode_refine(VectorField& field, const DispatchVector& p0, const LoadVector& loads,
                          const PowerSystem& system, int n_steps, bool project_each_step,
                          const ProjectionConfig& proj = {});

struct Stage2Weights {
  double fm = 0.0;
  double cost = 0.0;
  double improve = 0.0;
  double distance = 0.0;
  double balance = 0.0;
  double limits = 0.0;
  double delta = 1.0;  // $
};

Stage2Weights stage2_weights(double rho);

struct Stage2Terms {
  double fm = 0.0;
  double cost = 0.0;
  double improve = 0.0;
  double distance = 0.0;
  double balance = 0.0;
  double limits = 0.0;
  double total = 0.0;
};

struct Stage2Loss {
  ad::Var total;
  ad::Var refined;
  Stage2Terms terms;
};

struct RolloutConfig {
  int n_steps = 20;
  RolloutProjection projection = RolloutProjection::kHard;
  ProjectionConfig proj;
};

/// Weighted flow-matching and physics loss; balance and limit terms are
/// taken at the refined endpoint. `t` holds one path time per row.
Stage2Loss stage2_loss(ad::Tape& tape, VectorField& field, const ad::Matrix& p0,
                       const ad::Matrix& p1, const Eigen::VectorXd& t,
                       const Eigen::VectorXd& total_load, const PowerSystem& system,
                       const Stage2Weights& weights, const RolloutConfig& rollout_cfg = {});

struct Stage2EpochLog {
  int epoch = 0;  // 1-based
  double rho = 0.0;
  double lr = 0.0;
  Stage2Weights weights;
  Stage2Terms mean_terms;
  double mean_gap_pct = 0.0;  // refined training outputs
  double mean_grad_norm = 0.0;
};

struct Stage2Config {
  int epochs = 100;
  double lr = 3e-3;
  double weight_decay = 1e-5;
  std::size_t batch_size = 256;
  double clip_norm = 0.5;
  int rho_ramp_epochs = 20;
  RolloutConfig rollout;
  double t_lo = 0.1;
  double t_hi = 0.9;
  std::uint64_t seed = 42;
  std::function<void(const Stage2EpochLog&)> on_epoch;
};

/// AdamW with per-epoch cosine annealing and gradient-norm clipping. Initial
/// dispatches come from `frozen` in inference mode, computed once.
std::vector<Stage2EpochLog> train_stage2(VectorFieldModel& model, GnnModel& frozen,
                                         const SampleMatrices& data, const Stage2Config& config);

}  // namespace dcopf
