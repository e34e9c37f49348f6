#include "dcopf/cfm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dcopf/error.hpp"
#include "dcopf/optim.hpp"
#include "dcopf/rng.hpp"

namespace dcopf {

ad::RowVector time_embed(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("time_embed: t must lie in [0, 1]");
  ad::RowVector out(kTimeEmbedDim);
  double freq = std::numbers::pi;
  for (int k = 0; k < kTimeFrequencies; ++k) {
    // 2^k pi t is exact in binary, so large k only loses what sin/cos lose.
    out[k] = std::sin(freq * t);
    out[k + kTimeFrequencies] = std::cos(freq * t);
    freq *= 2.0;
  }
  return out;
}

ad::Matrix time_embed(const Eigen::VectorXd& t) {
  ad::Matrix out(t.size(), kTimeEmbedDim);
  for (Eigen::Index r = 0; r < t.size(); ++r) out.row(r) = time_embed(t[r]);
  return out;
}

ad::Matrix interpolate(const ad::Matrix& p0, const ad::Matrix& p1, const Eigen::VectorXd& t) {
  if (p0.rows() != p1.rows() || p0.cols() != p1.cols() || t.size() != p0.rows()) {
    throw DimensionError("interpolate: shape mismatch");
  }
  ad::Matrix out(p0.rows(), p0.cols());
  for (ad::Index r = 0; r < p0.rows(); ++r) out.row(r) = (1.0 - t[r]) * p0.row(r) + t[r] * p1.row(r);
  return out;
}

ad::Matrix path_velocity(const ad::Matrix& p0, const ad::Matrix& p1) {
  if (p0.rows() != p1.rows() || p0.cols() != p1.cols()) {
    throw DimensionError("path_velocity: shape mismatch");
  }
  return p1 - p0;
}

VectorFieldModel::VectorFieldModel(const PowerSystem& system, VectorFieldConfig config,
                                   std::uint64_t seed)
    : config_(config),
      p_min_(system.p_min().transpose()),
      range_((system.p_max() - system.p_min()).transpose()),
      p_max_total_(system.total_p_max()) {
  if (config_.hidden <= 0 || config_.blocks < 0) throw Error("vector field: bad architecture");
  const auto g = static_cast<ad::Index>(system.n_generators());
  const ad::Index h = config_.hidden;
  const ad::Index in = g + kTimeEmbedDim + 1;
  Rng rng(derive_seed(seed, "cfm-init"));
  auto dense = [&](const std::string& name, ad::Index fan_in, ad::Index fan_out, double gain) {
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    params_.add(name + ".weight", uniform_matrix(fan_in, fan_out, bound, rng));
    params_.add(name + ".bias", uniform_matrix(1, fan_out, bound, rng));
  };
  dense("input", in, h, 1.0);
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    params_.add(p + ".ln.gamma", ad::Matrix::Ones(1, h));
    params_.add(p + ".ln.beta", ad::Matrix::Zero(1, h));
    dense(p + ".fc0", h, h, 1.0);
    dense(p + ".fc1", h, h, 1.0);
  }
  params_.add("out.ln.gamma", ad::Matrix::Ones(1, h));
  params_.add("out.ln.beta", ad::Matrix::Zero(1, h));
  dense("out", h, g, config_.output_init_scale);
}

ad::Var VectorFieldModel::velocity(ad::Tape& tape, ad::Var p, const Eigen::VectorXd& t,
                                   const Eigen::VectorXd& total_load) {
  const ad::Index rows = p.rows();
  if (p.cols() != range_.size()) throw DimensionError("vector field: dispatch width mismatch");
  if (t.size() != rows || total_load.size() != rows) {
    throw DimensionError("vector field: batch size mismatch");
  }
  auto param = [&](const std::string& name) { return tape.parameter(params_.get(name)); };
  auto dense = [&](ad::Var x, const std::string& name) {
    return ad::linear(x, param(name + ".weight"), param(name + ".bias"));
  };

  const ad::RowVector inv_range = range_.cwiseInverse();
  const ad::Var p_norm = ad::mul_row(ad::add_row(p, tape.constant(ad::Matrix(-p_min_))),
                                     tape.constant(ad::Matrix(inv_range)));
  const ad::Var temb = tape.constant(time_embed(t));
  const ad::Var load = tape.constant(ad::Matrix(total_load / p_max_total_));
  ad::Var h = dense(ad::concat_cols({p_norm, temb, load}), "input");
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string pre = "block" + std::to_string(b);
    ad::Var r = ad::silu(ad::layer_norm(h, param(pre + ".ln.gamma"), param(pre + ".ln.beta")));
    r = dense(ad::silu(dense(r, pre + ".fc0")), pre + ".fc1");
    h = ad::add(h, r);
  }
  h = ad::silu(ad::layer_norm(h, param("out.ln.gamma"), param("out.ln.beta")));
  return ad::mul_row(dense(h, "out"), tape.constant(ad::Matrix(range_)));
}

ad::Var fm_loss(ad::Tape& tape, VectorField& field, const ad::Matrix& p0, const ad::Matrix& p1,
                const Eigen::VectorXd& t, const Eigen::VectorXd& total_load) {
  const ad::Var pt = tape.constant(interpolate(p0, p1, t));
  const ad::Var u = tape.constant(path_velocity(p0, p1));
  const ad::Var v = field.velocity(tape, pt, t, total_load);
  return ad::mean_all(ad::sum_cols(ad::square(ad::sub(v, u))));
}

std::string to_string(RolloutProjection mode) {
  switch (mode) {
    case RolloutProjection::kNone: return "none";
    case RolloutProjection::kSoft: return "soft";
    case RolloutProjection::kHard: return "hard";
  }
  return "?";
}

RolloutProjection parse_rollout_projection(const std::string& text) {
  if (text == "none") return RolloutProjection::kNone;
  if (text == "soft") return RolloutProjection::kSoft;
  if (text == "hard") return RolloutProjection::kHard;
  throw Error("unknown rollout projection '" + text + "' (expected none, soft or hard)");
}

namespace {

ad::Var project_step(ad::Var p, const Eigen::VectorXd& total_load, const PowerSystem& system,
                     RolloutProjection mode, const ProjectionConfig& proj) {
  switch (mode) {
    case RolloutProjection::kNone: return p;
    case RolloutProjection::kSoft: return batch::soft_project(p, total_load, system, proj.tau);
    case RolloutProjection::kHard: return batch::hard_project(p, total_load, system, proj);
  }
  return p;
}

}  // namespace

ad::Var rollout(ad::Tape& tape, VectorField& field, ad::Var p0, const Eigen::VectorXd& total_load,
                const PowerSystem& system, int n_steps, RolloutProjection mode,
                const ProjectionConfig& proj) {
  if (n_steps < 1) throw Error("rollout: n_steps must be >= 1");
  const double dt = 1.0 / n_steps;
  ad::Var p = p0;
  for (int n = 0; n < n_steps; ++n) {
    const Eigen::VectorXd t = Eigen::VectorXd::Constant(p.rows(), n * dt);
    p = ad::add(p, ad::scale(field.velocity(tape, p, t, total_load), dt));
    p = project_step(p, total_load, system, mode, proj);
  }
  return p;
}

ad::Matrix ode_refine(VectorField& field, const ad::Matrix& p0, const Eigen::VectorXd& total_load,
                      const PowerSystem& system, int n_steps, bool project_each_step,
                      const ProjectionConfig& proj, const StepObserver& observer) {
  if (n_steps < 1) throw Error("ode_refine: n_steps must be >= 1");
  if (total_load.size() != p0.rows()) throw DimensionError("ode_refine: batch size mismatch");
  const double dt = 1.0 / n_steps;
  ad::Matrix p = p0;
  for (int n = 0; n < n_steps; ++n) {
    // One short tape per step keeps memory flat over long rollouts.
    ad::Tape tape(false);
    const Eigen::VectorXd t = Eigen::VectorXd::Constant(p.rows(), n * dt);
    ad::Var x = tape.constant(p);
    x = ad::add(x, ad::scale(field.velocity(tape, x, t, total_load), dt));
    if (project_each_step) x = batch::hard_project(x, total_load, system, proj);
    p = x.value();
    if (observer) observer(n + 1, p);
  }
  return p;
}

DispatchVector ode_refine(VectorField& field, const DispatchVector& p0, const LoadVector& loads,
                          const PowerSystem& system, int n_steps, bool project_each_step,
                          const ProjectionConfig& proj) {
  const ad::Matrix row = p0.mw.transpose();
  const Eigen::VectorXd total = Eigen::VectorXd::Constant(1, loads.total());
  return DispatchVector(
      ode_refine(field, row, total, system, n_steps, project_each_step, proj).row(0).transpose());
}

Stage2Weights stage2_weights(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw Error("stage2_weights: progress must lie in [0, 1], got " + std::to_string(rho));
  }
  Stage2Weights w;
  w.fm = std::max(10.0 * (1.0 - rho), 1.0);
  w.cost = 100.0 * (1.0 + 2.0 * rho);
  w.improve = 50.0 * rho;
  w.distance = 30.0 * rho;
  w.balance = 50.0;
  w.limits = 25.0;
  w.delta = 1.0;
  return w;
}

namespace {

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NonFiniteError(term, "value " + std::to_string(v));
}

}  // namespace

Stage2Loss stage2_loss(ad::Tape& tape, VectorField& field, const ad::Matrix& p0,
                       const ad::Matrix& p1, const Eigen::VectorXd& t,
                       const Eigen::VectorXd& total_load, const PowerSystem& system,
                       const Stage2Weights& w, const RolloutConfig& rollout_cfg) {
  if (p0.rows() == 0) throw DimensionError("stage2_loss: empty batch");
  if (p0.cols() != static_cast<ad::Index>(system.n_generators())) {
    throw DimensionError("stage2_loss: dispatch width mismatch");
  }
  const ad::Var fm = fm_loss(tape, field, p0, p1, t, total_load);

  const ad::Var start = tape.constant(p0);
  const ad::Var refined = rollout(tape, field, start, total_load, system, rollout_cfg.n_steps,
                                  rollout_cfg.projection, rollout_cfg.proj);
  const ad::Var c_refined = batch_cost(refined, system);
  const ad::Var c_start = tape.constant(batch_cost(start, system).value());

  const ad::Var cost = ad::mean_all(c_refined);
  const ad::Var improve = ad::mean_all(ad::relu(ad::shift(ad::sub(c_refined, c_start), w.delta)));
  const ad::Var distance =
      ad::mean_all(ad::sum_cols(ad::square(ad::sub(refined, tape.constant(p1)))));
  const ad::Var balance = balance_penalty(refined, total_load);
  const ad::Var limits = limit_penalty(refined, system);

  Stage2Loss out;
  out.refined = refined;
  out.terms.fm = fm.item();
  out.terms.cost = cost.item();
  out.terms.improve = improve.item();
  out.terms.distance = distance.item();
  out.terms.balance = balance.item();
  out.terms.limits = limits.item();
  require_finite(out.terms.fm, "flow-matching");
  require_finite(out.terms.cost, "cost");
  require_finite(out.terms.improve, "improvement");
  require_finite(out.terms.distance, "distance");
  require_finite(out.terms.balance, "balance");
  require_finite(out.terms.limits, "limits");
  out.total = w.fm * fm + w.cost * cost + w.improve * improve + w.distance * distance +
              w.balance * balance + w.limits * limits;
  out.terms.total = out.total.item();
  require_finite(out.terms.total, "total");
  return out;
}

std::vector<Stage2EpochLog> train_stage2(VectorFieldModel& model, GnnModel& frozen,
                                         const SampleMatrices& data, const Stage2Config& config) {
  const auto n = static_cast<std::size_t>(data.loads.rows());
  if (n == 0) throw Error("train_stage2: empty dataset");
  if (config.epochs < 1 || config.batch_size == 0 || config.rho_ramp_epochs < 1) {
    throw Error("train_stage2: bad schedule");
  }
  if (!(0.0 <= config.t_lo && config.t_lo < config.t_hi && config.t_hi <= 1.0)) {
    throw Error("train_stage2: path time range must satisfy 0 <= t_lo < t_hi <= 1");
  }
  const PowerSystem& system = frozen.system();
  const ad::Matrix p0_all = frozen.predict(data.loads, config.rollout.proj);

  auto params = model.parameters().all();
  ad::Adam opt(params, ad::adamw_config(config.lr, config.weight_decay));
  std::vector<std::size_t> order(n);
  std::vector<Stage2EpochLog> logs;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double rho = std::min(static_cast<double>(epoch) / config.rho_ramp_epochs, 1.0);
    const Stage2Weights w = stage2_weights(rho);
    const double lr = ad::cosine_anneal(config.lr, epoch - 1, config.epochs);
    opt.set_lr(lr);

    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "stage2-shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> t_dist(config.t_lo, config.t_hi);

    Stage2EpochLog log;
    log.epoch = epoch;
    log.rho = rho;
    log.lr = lr;
    log.weights = w;
    double gap_sum = 0.0;
    double norm_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t s = 0; s < n; s += config.batch_size) {
      const std::size_t stop = std::min(n, s + config.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(s),
                                          order.begin() + static_cast<std::ptrdiff_t>(stop));
      const SampleMatrices b = stack_rows(data, rows);
      ad::Matrix p0(static_cast<ad::Index>(rows.size()), p0_all.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        p0.row(static_cast<ad::Index>(r)) = p0_all.row(static_cast<ad::Index>(rows[r]));
      }
      Eigen::VectorXd t(p0.rows());
      for (ad::Index r = 0; r < t.size(); ++r) t[r] = t_dist(rng);

      ad::Tape tape;
      const Stage2Loss loss =
          stage2_loss(tape, model, p0, b.optimal_dispatch, t, b.total_load, system, w,
                      config.rollout);
      opt.zero_grad();
      tape.backward(loss.total);
      norm_sum += ad::clip_grad_norm(params, config.clip_norm);
      opt.step();
      ++n_batches;

      const double frac = static_cast<double>(stop - s) / static_cast<double>(n);
      log.mean_terms.fm += frac * loss.terms.fm;
      log.mean_terms.cost += frac * loss.terms.cost;
      log.mean_terms.improve += frac * loss.terms.improve;
      log.mean_terms.distance += frac * loss.terms.distance;
      log.mean_terms.balance += frac * loss.terms.balance;
      log.mean_terms.limits += frac * loss.terms.limits;
      log.mean_terms.total += frac * loss.terms.total;
      const ad::Matrix& pr = loss.refined.value();
      for (ad::Index r = 0; r < pr.rows(); ++r) {
        const double c = cost(system, DispatchVector(pr.row(r).transpose()));
        gap_sum += 100.0 * (c - b.optimal_cost[r]) / b.optimal_cost[r];
      }
    }
    log.mean_gap_pct = gap_sum / static_cast<double>(n);
    log.mean_grad_norm = norm_sum / static_cast<double>(n_batches);
    if (config.on_epoch) config.on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

}  // namespace dcopf
