#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcopf/autodiff.hpp"

namespace dcopf::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// AdamW: weight decay applied directly to the parameters, not to the gradient.
  bool decoupled_weight_decay = false;
};

/// Adam / AdamW with bias correction.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  std::int64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const Matrix& first_moment(std::size_t i) const { return m_[i]; }
  const Matrix& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t steps_ = 0;
};

inline AdamConfig adamw_config(double lr, double weight_decay) {
  AdamConfig c;
  c.lr = lr;
  c.weight_decay = weight_decay;
  c.decoupled_weight_decay = true;
  return c;
}

/// lr_min + (lr_base - lr_min) * (1 + cos(pi * epoch / total_epochs)) / 2.
double cosine_anneal(double lr_base, double epoch, double total_epochs, double lr_min = 0.0);

/// Global L2 norm of all gradients.
double grad_norm(const std::vector<Parameter*>& params);

/// Rescales every gradient by max_norm / norm when the global norm exceeds
/// max_norm. Returns the norm measured before clipping.
double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm);

// Checkpoints: text file, header "dcopf-checkpoint 1", then one record per
// parameter ("param <name> <rows> <cols>" followed by `rows` lines of values
// printed with 17 significant digits).
void save_checkpoint(const ParameterStore& store, const std::string& path);
/// Loads into an existing store; names and shapes must match exactly.
void load_checkpoint(ParameterStore& store, const std::string& path);

}  // namespace dcopf::ad
