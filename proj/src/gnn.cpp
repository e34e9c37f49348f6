#include "dcopf/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcopf/error.hpp"
#include "dcopf/optim.hpp"
#include "dcopf/rng.hpp"

namespace dcopf {

LoadNormalizer::LoadNormalizer(ad::RowVector lo, ad::RowVector hi)
    : lo_(std::move(lo)), hi_(std::move(hi)) {
  if (lo_.size() != hi_.size()) throw DimensionError("normaliser bounds differ in length");
  inv_range_.resize(lo_.size());
  for (ad::Index i = 0; i < lo_.size(); ++i) {
    const double r = hi_[i] - lo_[i];
    if (r < 0.0) throw Error("normaliser has hi < lo at bus " + std::to_string(i + 1));
    // A constant bus carries no signal; map it to zero instead of dividing by ~0.
    inv_range_[i] = r > 1e-9 * std::max(1.0, std::abs(hi_[i])) ? 1.0 / r : 0.0;
  }
}

LoadNormalizer LoadNormalizer::fit(const ad::Matrix& loads) {
  if (loads.rows() == 0) throw Error("cannot fit a load normaliser on an empty set");
  return {loads.colwise().minCoeff(), loads.colwise().maxCoeff()};
}

ad::Matrix LoadNormalizer::apply(const ad::Matrix& loads) const {
  if (!fitted()) throw Error("load normaliser used before fitting");
  if (loads.cols() != lo_.size()) throw DimensionError("load width does not match normaliser");
  ad::Matrix out = loads.rowwise() - lo_;
  out.array().rowwise() *= inv_range_.array();
  return out;
}

ad::Matrix normalized_adjacency(const PowerSystem& system) {
  const auto n = static_cast<ad::Index>(system.n_buses());
  ad::Matrix a = ad::Matrix::Identity(n, n);
  for (const auto& line : system.lines()) {
    const auto i = static_cast<ad::Index>(line.from_bus);
    const auto j = static_cast<ad::Index>(line.to_bus);
    a(i, j) = 1.0;
    a(j, i) = 1.0;
  }
  const Eigen::VectorXd d_inv_sqrt = a.rowwise().sum().array().rsqrt();
  return d_inv_sqrt.asDiagonal() * a * d_inv_sqrt.asDiagonal();
}

ad::Var gcn_layer(ad::Var h, const ad::Matrix& a_hat, ad::Var weight, ad::Var gamma,
                  ad::Var beta) {
  if (a_hat.rows() != a_hat.cols() || a_hat.rows() == 0) {
    throw DimensionError("gcn_layer: adjacency must be square and non-empty");
  }
  if (h.rows() % a_hat.rows() != 0) {
    throw DimensionError("gcn_layer: feature rows are not a multiple of the node count");
  }
  const ad::Var mixed = ad::block_left_multiply(ad::matmul(h, weight), a_hat, a_hat.rows());
  return ad::relu(ad::layer_norm(mixed, gamma, beta));
}

namespace {

ad::Matrix fan_in_uniform(ad::Index fan_in, ad::Index fan_out, Rng& rng) {
  return uniform_matrix(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace

GnnModel::GnnModel(const PowerSystem& system, GnnConfig config, std::uint64_t seed)
    : system_(system), config_(config), a_hat_(normalized_adjacency(system)) {
  if (config_.hidden <= 0 || config_.head_hidden <= 0) throw Error("GNN widths must be positive");
  for (const auto& g : system_.generators()) gen_bus_.push_back(static_cast<ad::Index>(g.bus));
  p_min_ = system_.p_min().transpose();
  range_ = (system_.p_max() - system_.p_min()).transpose();

  Rng rng(derive_seed(seed, "gnn-init"));
  const ad::Index h = config_.hidden;
  params_.add("embed.weight", fan_in_uniform(1, h, rng));
  params_.add("embed.bias", fan_in_uniform(1, h, rng));
  for (int l = 0; l < 2; ++l) {
    const std::string p = "gcn" + std::to_string(l) + ".";
    params_.add(p + "weight", fan_in_uniform(h, h, rng));
    params_.add(p + "ln.gamma", ad::Matrix::Ones(1, h));
    params_.add(p + "ln.beta", ad::Matrix::Zero(1, h));
  }
  params_.add("head0.weight", fan_in_uniform(h, config_.head_hidden, rng));
  params_.add("head0.bias", uniform_matrix(1, config_.head_hidden,
                                           1.0 / std::sqrt(static_cast<double>(h)), rng));
  params_.add("head1.weight", fan_in_uniform(config_.head_hidden, 1, rng));
  params_.add("head1.bias",
              uniform_matrix(1, 1, 1.0 / std::sqrt(static_cast<double>(config_.head_hidden)), rng));
}

ad::Var GnnModel::forward_raw(ad::Tape& tape, const ad::Matrix& loads) {
  const auto n = static_cast<ad::Index>(system_.n_buses());
  if (loads.cols() != n) throw DimensionError("GNN input width does not match the bus count");
  const ad::Index batch = loads.rows();
  const ad::Matrix scaled = normalizer_.apply(loads);

  auto p = [&](const char* name) { return tape.parameter(params_.get(name)); };
  ad::Var x = tape.constant(ad::Matrix(Eigen::Map<const ad::Matrix>(scaled.data(), batch * n, 1)));
  ad::Var h = ad::linear(x, p("embed.weight"), p("embed.bias"));
  h = gcn_layer(h, a_hat_, p("gcn0.weight"), p("gcn0.ln.gamma"), p("gcn0.ln.beta"));
  h = gcn_layer(h, a_hat_, p("gcn1.weight"), p("gcn1.ln.gamma"), p("gcn1.ln.beta"));

  const auto g = static_cast<ad::Index>(gen_bus_.size());
  std::vector<ad::Index> rows;
  rows.reserve(static_cast<std::size_t>(batch * g));
  for (ad::Index b = 0; b < batch; ++b) {
    for (ad::Index bus : gen_bus_) rows.push_back(b * n + bus);
  }
  ad::Var z = ad::gather_rows(h, rows);
  z = ad::relu(ad::linear(z, p("head0.weight"), p("head0.bias")));
  z = ad::linear(z, p("head1.weight"), p("head1.bias"));
  z = ad::reshape(z, batch, g);
  const ad::Var range = tape.constant(ad::Matrix(range_));
  const ad::Var lo = tape.constant(ad::Matrix(p_min_));
  return ad::add_row(ad::mul_row(ad::shift(z, 0.5), range), lo);
}

ad::Var GnnModel::forward_train(ad::Tape& tape, const ad::Matrix& loads, double tau) {
  const Eigen::VectorXd totals = loads.rowwise().sum();
  return batch::soft_project(forward_raw(tape, loads), totals, system_, tau);
}

ad::Matrix GnnModel::predict(const ad::Matrix& loads, const ProjectionConfig& proj) {
  constexpr ad::Index kChunk = 512;  // bounds the activation memory of one pass
  ad::Matrix out(loads.rows(), static_cast<ad::Index>(gen_bus_.size()));
  for (ad::Index start = 0; start < loads.rows(); start += kChunk) {
    const ad::Index count = std::min(kChunk, loads.rows() - start);
    const ad::Matrix chunk = loads.middleRows(start, count);
    const Eigen::VectorXd totals = chunk.rowwise().sum();
    ad::Tape tape(false);
    const ad::Var soft = batch::soft_project(forward_raw(tape, chunk), totals, system_, proj.tau);
    out.middleRows(start, count) = batch::hard_project(soft, totals, system_, proj).value();
  }
  return out;
}

DispatchVector GnnModel::predict(const LoadVector& loads, const ProjectionConfig& proj) {
  const ad::Matrix row = loads.mw.transpose();
  return DispatchVector(predict(row, proj).row(0).transpose());
}

CurriculumWeights curriculum(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw Error("curriculum: progress must lie in [0, 1], got " + std::to_string(rho));
  }
  CurriculumWeights w;
  w.econ = rho <= 0.33 ? 5.0 : 20.0;
  w.kkt = rho <= 0.33 ? 0.0 : 10.0;
  w.gap = 30.0 * (1.0 - 0.7 * rho);
  w.direct = 5.0 * (1.0 + 9.0 * rho);
  w.balance = 500.0;
  w.limits = 250.0;
  return w;
}

namespace {

ad::RowVector coefficient_row(const PowerSystem& system, double Generator::*field) {
  const auto& gens = system.generators();
  ad::RowVector out(static_cast<ad::Index>(gens.size()));
  for (std::size_t i = 0; i < gens.size(); ++i) out[static_cast<ad::Index>(i)] = gens[i].*field;
  return out;
}

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NonFiniteError(term, "value " + std::to_string(v));
}

}  // namespace

ad::Var batch_cost(ad::Var p, const PowerSystem& system) {
  ad::Tape& tape = *p.tape();
  const ad::Var c2 = tape.constant(ad::Matrix(coefficient_row(system, &Generator::c2)));
  const ad::Var c1 = tape.constant(ad::Matrix(coefficient_row(system, &Generator::c1)));
  const ad::Var c0 = tape.constant(ad::Matrix(coefficient_row(system, &Generator::c0)));
  return ad::sum_cols(
      ad::add_row(ad::add(ad::mul_row(ad::square(p), c2), ad::mul_row(p, c1)), c0));
}

ad::Var batch_marginal_cost(ad::Var p, const PowerSystem& system) {
  ad::Tape& tape = *p.tape();
  const ad::Matrix two_c2 = 2.0 * coefficient_row(system, &Generator::c2);
  const ad::Var c1 = tape.constant(ad::Matrix(coefficient_row(system, &Generator::c1)));
  return ad::add_row(ad::mul_row(p, tape.constant(two_c2)), c1);
}

ad::Var balance_penalty(ad::Var p, const Eigen::VectorXd& total_load) {
  const ad::Var load = p.tape()->constant(ad::Matrix(total_load));
  return ad::mean_all(ad::square(ad::sub(ad::sum_cols(p), load)));
}

ad::Var limit_penalty(ad::Var p, const PowerSystem& system) {
  ad::Tape& tape = *p.tape();
  const ad::Matrix lo = system.p_min().transpose();
  const ad::Matrix neg_hi = -system.p_max().transpose();
  const ad::Var below = ad::relu(ad::add_row(-p, tape.constant(lo)));
  const ad::Var above = ad::relu(ad::add_row(p, tape.constant(neg_hi)));
  return ad::mean_all(ad::sum_cols(ad::square(ad::add(below, above))));
}

Stage1Loss stage1_loss(ad::Tape& tape, ad::Var dispatch, const Eigen::VectorXd& optimal_cost,
                       const Eigen::VectorXd& total_load, const PowerSystem& system,
                       const CurriculumWeights& w, const NearBoundConfig& near) {
  const ad::Index rows = dispatch.rows();
  const auto g = static_cast<ad::Index>(system.n_generators());
  if (dispatch.cols() != g) throw DimensionError("stage1_loss: dispatch width mismatch");
  if (optimal_cost.size() != rows || total_load.size() != rows) {
    throw DimensionError("stage1_loss: batch size mismatch");
  }
  if (rows == 0) throw DimensionError("stage1_loss: empty batch");
  if ((optimal_cost.array() <= 0.0).any()) throw Error("stage1_loss: optimal cost must be > 0");
  if (!(near.kkt_eps > 0.0)) throw Error("stage1_loss: kkt_eps must be positive");

  const ad::Var cost = batch_cost(dispatch, system);
  const ad::Var marginal = batch_marginal_cost(dispatch, system);

  // ((C - C*) / C*)^2
  const ad::Var inv_opt = tape.constant(ad::Matrix(optimal_cost.cwiseInverse()));
  const ad::Var rel = ad::shift(ad::mul(cost, inv_opt), -1.0);
  const ad::Var gap = ad::mean_all(ad::square(rel));

  const ad::Var econ = ad::mean_all(ad::variance_cols(marginal));

  // Near-bound masks are piecewise constant in the dispatch.
  const ad::Matrix& pv = dispatch.value();
  const ad::RowVector lo = system.p_min().transpose();
  const ad::RowVector hi = system.p_max().transpose();
  ad::Matrix at_min = ad::Matrix::Zero(rows, g);
  ad::Matrix at_max = ad::Matrix::Zero(rows, g);
  for (ad::Index b = 0; b < rows; ++b) {
    for (ad::Index i = 0; i < g; ++i) {
      if (std::abs(pv(b, i) - lo[i]) < near.kkt_eps) at_min(b, i) = 1.0;
      if (std::abs(hi[i] - pv(b, i)) < near.kkt_eps) at_max(b, i) = 1.0;
    }
  }
  const ad::Var lambda_bar = ad::mean_cols(marginal);
  const ad::Var lambda_wide = ad::mul_col(tape.constant(ad::Matrix::Ones(rows, g)), lambda_bar);
  const ad::Var excess = ad::sub(marginal, lambda_wide);
  const ad::Var kkt_min = ad::mean_all(
      ad::sum_cols(ad::mul(ad::relu(excess), tape.constant(std::move(at_min)))));
  const ad::Var kkt_max = ad::mean_all(
      ad::sum_cols(ad::mul(ad::relu(-excess), tape.constant(std::move(at_max)))));

  const ad::Var balance = balance_penalty(dispatch, total_load);
  const ad::Var limits = limit_penalty(dispatch, system);

  const ad::Var direct = ad::mean_all(cost);

  Stage1Loss out;
  out.terms.gap = gap.item();
  out.terms.econ = econ.item();
  out.terms.kkt_min = kkt_min.item();
  out.terms.kkt_max = kkt_max.item();
  out.terms.balance = balance.item();
  out.terms.limits = limits.item();
  out.terms.direct = direct.item();
  require_finite(out.terms.gap, "cost-gap");
  require_finite(out.terms.econ, "economic");
  require_finite(out.terms.kkt_min, "kkt-min");
  require_finite(out.terms.kkt_max, "kkt-max");
  require_finite(out.terms.balance, "balance");
  require_finite(out.terms.limits, "limits");
  require_finite(out.terms.direct, "cost-direct");

  out.total = w.gap * gap + w.econ * econ + w.kkt * (kkt_min + kkt_max) + w.balance * balance +
              w.limits * limits + w.direct * direct;
  out.terms.total = out.total.item();
  require_finite(out.terms.total, "total");
  return out;
}

std::vector<Stage1EpochLog> train_stage1(GnnModel& model, const SampleMatrices& data,
                                         const Stage1Config& config) {
  const auto n = static_cast<std::size_t>(data.loads.rows());
  if (n == 0) throw Error("train_stage1: empty dataset");
  if (config.epochs < 1 || config.batch_size == 0) throw Error("train_stage1: bad schedule");
  model.set_normalizer(LoadNormalizer::fit(data.loads));

  auto params = model.parameters().all();
  ad::Adam opt(params, ad::AdamConfig{.lr = config.lr});
  const PowerSystem& system = model.system();
  const Eigen::VectorXd lo = system.p_min();
  const Eigen::VectorXd hi = system.p_max();

  std::vector<std::size_t> order(n);
  std::vector<Stage1EpochLog> logs;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double rho = static_cast<double>(epoch) / config.epochs;
    const CurriculumWeights w = curriculum(rho);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, "stage1-shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    Stage1EpochLog log;
    log.epoch = epoch;
    log.rho = rho;
    log.lr = config.lr;
    log.weights = w;
    double gap_sum = 0.0;
    std::size_t feasible = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(stop));
      const SampleMatrices b = stack_rows(data, rows);
      ad::Tape tape;
      const ad::Var p = model.forward_train(tape, b.loads, config.tau);
      const Stage1Loss loss =
          stage1_loss(tape, p, b.optimal_cost, b.total_load, system, w, config.near);
      opt.zero_grad();
      tape.backward(loss.total);
      opt.step();

      const double frac = static_cast<double>(stop - start) / static_cast<double>(n);
      auto acc = [frac](double& dst, double v) { dst += frac * v; };
      acc(log.mean_terms.gap, loss.terms.gap);
      acc(log.mean_terms.econ, loss.terms.econ);
      acc(log.mean_terms.kkt_min, loss.terms.kkt_min);
      acc(log.mean_terms.kkt_max, loss.terms.kkt_max);
      acc(log.mean_terms.balance, loss.terms.balance);
      acc(log.mean_terms.limits, loss.terms.limits);
      acc(log.mean_terms.direct, loss.terms.direct);
      acc(log.mean_terms.total, loss.terms.total);

      const ad::Matrix& pv = p.value();
      for (ad::Index r = 0; r < pv.rows(); ++r) {
        const Eigen::VectorXd pr = pv.row(r).transpose();
        const double c = cost(system, DispatchVector(pr));
        gap_sum += 100.0 * (c - b.optimal_cost[r]) / b.optimal_cost[r];
        const bool ok = std::abs(pr.sum() - b.total_load[r]) <= config.feas_tol &&
                        (pr.array() >= lo.array() - config.feas_tol).all() &&
                        (pr.array() <= hi.array() + config.feas_tol).all();
        if (ok) ++feasible;
      }
    }
    log.mean_gap_pct = gap_sum / static_cast<double>(n);
    log.feasible_fraction = static_cast<double>(feasible) / static_cast<double>(n);
    if (config.on_epoch) config.on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

}  // namespace dcopf
