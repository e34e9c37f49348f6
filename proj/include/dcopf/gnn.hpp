#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcopf/autodiff.hpp"
#include "dcopf/dataset.hpp"
#include "dcopf/grid.hpp"
#include "dcopf/projection.hpp"

namespace dcopf {

struct GnnConfig {
  ad::Index hidden = 128;
  ad::Index head_hidden = 64;
};

/// Per-bus min-max scaling fitted on training loads. Buses whose load never
/// varies map to zero.
class LoadNormalizer {
 public:
  LoadNormalizer() = default;
  LoadNormalizer(ad::RowVector lo, ad::RowVector hi);
  static LoadNormalizer fit(const ad::Matrix& loads);

  ad::Matrix apply(const ad::Matrix& loads) const;
  const ad::RowVector& lo() const { return lo_; }
  const ad::RowVector& hi() const { return hi_; }
  bool fitted() const { return lo_.size() > 0; }

 private:
  ad::RowVector lo_;
  ad::RowVector hi_;
  ad::RowVector inv_range_;
};

/// D^-1/2 (A + I) D^-1/2 over the line graph (parallel lines count once).
ad::Matrix normalized_adjacency(const PowerSystem& system);

/// relu(layer_norm(A_hat H W)), applied to every consecutive block of
/// A_hat.rows() rows of `h`.
ad::Var gcn_layer(ad::Var h, const ad::Matrix& a_hat, ad::Var weight, ad::Var gamma,
                  ad::Var beta);

class GnnModel {
 public:
  GnnModel(const PowerSystem& system, GnnConfig config, std::uint64_t seed);

  /// Unprojected dispatch, batch x n_generators: p_min + range * (0.5 + head).
  ad::Var forward_raw(ad::Tape& tape, const ad::Matrix& loads);
  /// Soft-projected dispatch used during training.
  ad::Var forward_train(ad::Tape& tape, const ad::Matrix& loads, double tau);
  /// Soft projection followed by hard projection; every row is feasible.
  ad::Matrix predict(const ad::Matrix& loads, const ProjectionConfig& proj = {});
  DispatchVector predict(const LoadVector& loads, const ProjectionConfig& proj = {});

  ad::ParameterStore& parameters() { return params_; }
  const ad::ParameterStore& parameters() const { return params_; }
  const LoadNormalizer& normalizer() const { return normalizer_; }
  void set_normalizer(LoadNormalizer n) { normalizer_ = std::move(n); }
  const PowerSystem& system() const { return system_; }
  const GnnConfig& config() const { return config_; }

 private:
  PowerSystem system_;
  GnnConfig config_;
  ad::Matrix a_hat_;
  std::vector<ad::Index> gen_bus_;
  ad::RowVector p_min_;
  ad::RowVector range_;
  LoadNormalizer normalizer_;
  ad::ParameterStore params_;
};

/// Batch cost per row (rows x 1) and marginal costs (rows x G).
ad::Var batch_cost(ad::Var p, const PowerSystem& system);
ad::Var batch_marginal_cost(ad::Var p, const PowerSystem& system);
/// Batch mean of (sum p - total load)^2.
ad::Var balance_penalty(ad::Var p, const Eigen::VectorXd& total_load);
/// Batch mean of sum_i (relu(p_min - p) + relu(p - p_max))^2.
ad::Var limit_penalty(ad::Var p, const PowerSystem& system);

struct CurriculumWeights {
  double gap = 0.0;
  double econ = 0.0;
  double kkt = 0.0;
  double balance = 0.0;
  double limits = 0.0;
  double direct = 0.0;
};

/// Stage-1 loss weights at training progress rho in [0, 1].
CurriculumWeights curriculum(double rho);

struct NearBoundConfig {
  double kkt_eps = 0.5;  // MW
};

struct Stage1Terms {
  double gap = 0.0;
  double econ = 0.0;
  double kkt_min = 0.0;
  double kkt_max = 0.0;
  double balance = 0.0;
  double limits = 0.0;
  double direct = 0.0;
  double total = 0.0;
};

struct Stage1Loss {
  ad::Var total;
  Stage1Terms terms;
};

/// Weighted six-term loss over a batch (rows = samples). Throws
/// NonFiniteError naming the first non-finite term and Error when an
/// optimal cost is not positive.
Stage1Loss stage1_loss(ad::Tape& tape, ad::Var dispatch, const Eigen::VectorXd& optimal_cost,
                       const Eigen::VectorXd& total_load, const PowerSystem& system,
                       const CurriculumWeights& weights, const NearBoundConfig& near = {});

struct Stage1EpochLog {
  int epoch = 0;  // 1-based
  double rho = 0.0;
  double lr = 0.0;
  CurriculumWeights weights;
  Stage1Terms mean_terms;
  double mean_gap_pct = 0.0;       // soft-projected training outputs
  double feasible_fraction = 0.0;  // soft-projected outputs at feas_tol
};

struct Stage1Config {
  int epochs = 40;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  double tau = 0.05;
  NearBoundConfig near;
  double feas_tol = 0.1;
  std::uint64_t seed = 42;
  std::function<void(const Stage1EpochLog&)> on_epoch;
};

/// Adam training with the curriculum at rho = epoch / epochs. Fits the load
/// normaliser on `data` first.
std::vector<Stage1EpochLog> train_stage1(GnnModel& model, const SampleMatrices& data,
                                         const Stage1Config& config);

}  // namespace dcopf
