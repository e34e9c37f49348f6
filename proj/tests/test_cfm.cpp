#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dcopf/cfm.hpp"
#include "dcopf/dataset.hpp"
#include "dcopf/error.hpp"
#include "dcopf/gnn.hpp"
#include "dcopf/oracle.hpp"
#include "dcopf/projection.hpp"
#include "reference.hpp"

using namespace dcopf;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

// Returns a fixed velocity for every state and time.
class ConstantField : public VectorField {
 public:
  explicit ConstantField(Matrix v) : v_(std::move(v)) {}
  Var velocity(Tape& tape, Var p, const Eigen::VectorXd&, const Eigen::VectorXd&) override {
    if (v_.rows() == p.rows()) return tape.constant(v_);
    return tape.constant(v_.row(0).replicate(p.rows(), 1));
  }

 private:
  Matrix v_;
};

// v(p) = A p + b per row, so the loss depends smoothly on the state.
class LinearField : public VectorField {
 public:
  LinearField(Matrix a, Matrix b) : a_(std::move(a)), b_(std::move(b)) {}
  Var velocity(Tape& tape, Var p, const Eigen::VectorXd&, const Eigen::VectorXd&) override {
    return ad::add_row(ad::matmul(p, tape.constant(a_)), tape.constant(b_));
  }

 private:
  Matrix a_, b_;
};

struct Batch {
  Matrix loads, optimal;
  Eigen::VectorXd cost, total;
};

Batch oracle_batch(const PowerSystem& sys, std::size_t n, std::uint64_t seed, double lo = 0.7,
                   double hi = 1.0) {
  const auto m = stack(generate(sys, {"t", lo, hi, n}, seed));
  return {m.loads, m.optimal_dispatch, m.optimal_cost, m.total_load};
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Feasible but deliberately poor starting points: hard projection of noise.
Matrix noisy_start(const PowerSystem& sys, const Eigen::VectorXd& totals, std::mt19937_64& rng) {
  Matrix p = random_matrix(totals.size(), 6, rng, 0.0, 200.0);
  for (Eigen::Index b = 0; b < p.rows(); ++b) {
    p.row(b) = hard_project(DispatchVector(p.row(b).transpose()), totals[b], sys).mw.transpose();
  }
  return p;
}

}  // namespace

TEST_CASE("time embedding") {
  const auto e0 = time_embed(0.0);
  REQUIRE(e0.size() == 64);
  CHECK(e0.head(32).cwiseAbs().maxCoeff() == 0.0);
  CHECK((e0.tail(32).array() == 1.0).all());
  const auto eh = time_embed(0.5);
  CHECK(eh[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(eh[32]) < 1e-15);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double t = u(rng);
    const auto e = time_embed(t);
    CHECK(e.size() == 64);
    CHECK(e.cwiseAbs().maxCoeff() <= 1.0);
    for (int k = 0; k < 32; k += 7) {
      const double arg = std::ldexp(std::numbers::pi * t, k);
      CHECK(e[k] == doctest::Approx(std::sin(arg)).epsilon(1e-12).scale(1.0));
      CHECK(e[32 + k] == doctest::Approx(std::cos(arg)).epsilon(1e-12).scale(1.0));
    }
  }
  Eigen::VectorXd ts(3);
  ts << 0.0, 0.25, 1.0;
  const Matrix rows = time_embed(ts);
  CHECK(rows.rows() == 3);
  CHECK(rows.row(1) == time_embed(0.25));
  CHECK_THROWS(time_embed(-0.01));
  CHECK_THROWS(time_embed(1.01));
}

TEST_CASE("straight path") {
  std::mt19937_64 rng(2);
  const Matrix p0 = random_matrix(5, 6, rng, 0, 100), p1 = random_matrix(5, 6, rng, 0, 100);
  Eigen::VectorXd t(5);
  t << 0.0, 1.0, 0.5, 0.5, 0.25;
  const Matrix pt = interpolate(p0, p1, t);
  CHECK(pt.row(0) == p0.row(0));
  CHECK(pt.row(1) == p1.row(1));
  CHECK((pt.row(2) - 0.5 * (p0.row(2) + p1.row(2))).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((path_velocity(p0, p0)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(path_velocity(p0, p1) == p1 - p0);
  CHECK_THROWS_AS(interpolate(p0, p1.topRows(4), t), DimensionError);
}

TEST_CASE("flow-matching loss with stub fields") {
  const auto sys = build_case30();
  const auto batch = oracle_batch(sys, 8, 3);
  std::mt19937_64 rng(3);
  const Matrix p0 = noisy_start(sys, batch.total, rng);
  Eigen::VectorXd t = Eigen::VectorXd::Constant(8, 0.4);
  Tape tape;
  SUBCASE("exact velocity gives zero loss") {
    ConstantField exact(path_velocity(p0, batch.optimal));
    CHECK(fm_loss(tape, exact, p0, batch.optimal, t, batch.total).item() == 0.0);
  }
  SUBCASE("equal endpoints with a zero field") {
    ConstantField zero(Matrix::Zero(1, 6));
    CHECK(fm_loss(tape, zero, p0, p0, t, batch.total).item() == 0.0);
  }
  SUBCASE("order of samples does not matter") {
    VectorFieldModel model(sys, {}, 4);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    for (Eigen::Index i = 0; i < 8; ++i) t[i] = u(rng);
    const double a = fm_loss(tape, model, p0, batch.optimal, t, batch.total).item();
    const std::vector<Eigen::Index> perm = {3, 1, 7, 0, 5, 2, 6, 4};
    Matrix q0(8, 6), q1(8, 6);
    Eigen::VectorXd qt(8), qd(8);
    for (Eigen::Index i = 0; i < 8; ++i) {
      q0.row(i) = p0.row(perm[static_cast<std::size_t>(i)]);
      q1.row(i) = batch.optimal.row(perm[static_cast<std::size_t>(i)]);
      qt[i] = t[perm[static_cast<std::size_t>(i)]];
      qd[i] = batch.total[perm[static_cast<std::size_t>(i)]];
    }
    const double b = fm_loss(tape, model, q0, q1, qt, qd).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-13));
  }
  SUBCASE("value against direct evaluation") {
    Matrix v = random_matrix(8, 6, rng, -5, 5);
    ConstantField field(v);
    const Matrix u = batch.optimal - p0;
    CHECK(fm_loss(tape, field, p0, batch.optimal, t, batch.total).item() ==
          doctest::Approx((v - u).array().square().rowwise().sum().mean()).epsilon(1e-13));
  }
}

TEST_CASE("Euler refinement") {
  const auto sys = build_case30();
  const auto batch = oracle_batch(sys, 16, 5);
  std::mt19937_64 rng(5);
  const Matrix p0 = noisy_start(sys, batch.total, rng);
  SUBCASE("constant oracle field lands on the target") {
    ConstantField field(batch.optimal - p0);
    for (int n : {1, 20, 30}) {
      const Matrix out = ode_refine(field, p0, batch.total, sys, n, false);
      CHECK((out - batch.optimal).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("zero field returns the start") {
    ConstantField field(Matrix::Zero(1, 6));
    CHECK(ode_refine(field, p0, batch.total, sys, 30, false) == p0);
    CHECK((ode_refine(field, p0, batch.total, sys, 30, true) - p0).cwiseAbs().maxCoeff() < 0.005);
  }
  SUBCASE("every projected intermediate state is feasible") {
    VectorFieldModel model(sys, {128, 2, 1.0}, 6);  // untrained, large output
    int steps = 0;
    bool all_ok = true;
    ode_refine(model, p0, batch.total, sys, 30, true, {}, [&](int, const Matrix& s) {
      ++steps;
      for (Eigen::Index b = 0; b < s.rows(); ++b) {
        Eigen::VectorXd loads = Eigen::VectorXd::Zero(30);
        loads[0] = batch.total[b];
        all_ok = all_ok && check_feasibility(DispatchVector(s.row(b).transpose()), LoadVector(loads), sys, 0.1).feasible;
      }
    });
    CHECK(steps == 30);
    CHECK(all_ok);
  }
  SUBCASE("vector overload") {
    ConstantField field(batch.optimal.row(2) - p0.row(2));
    const LoadVector loads(Eigen::VectorXd(batch.loads.row(2).transpose()));
    const auto out = ode_refine(field, DispatchVector(p0.row(2).transpose()), loads, sys, 20, false);
    CHECK((out.mw - batch.optimal.row(2).transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
  ConstantField zero(Matrix::Zero(1, 6));
  CHECK_THROWS(ode_refine(zero, p0, batch.total, sys, 0, true));
}

TEST_CASE("projected refinement is feasible for random models") {
  const auto sys = build_case30();
  const auto batch = oracle_batch(sys, 32, 7, 0.7, 1.3);
  std::mt19937_64 rng(7);
  const Matrix p0 = noisy_start(sys, batch.total, rng);
  int infeasible = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    VectorFieldModel model(sys, {64, 1, 5.0 * static_cast<double>(seed + 1)}, seed);
    const Matrix out = ode_refine(model, p0, batch.total, sys, 10, true);
    for (Eigen::Index b = 0; b < out.rows(); ++b) {
      Eigen::VectorXd loads = Eigen::VectorXd::Zero(30);
      loads[1] = batch.total[b];
      if (!check_feasibility(DispatchVector(out.row(b).transpose()), LoadVector(loads), sys, 0.1).feasible) {
        ++infeasible;
      }
    }
  }
  CHECK(infeasible == 0);
}

TEST_CASE("stage-2 weights") {
  const auto check = [](double rho, double fm, double cost, double imp, double dist) {
    const auto w = stage2_weights(rho);
    CHECK(w.fm == doctest::Approx(fm).epsilon(1e-15));
    CHECK(w.cost == doctest::Approx(cost).epsilon(1e-15));
    CHECK(w.improve == doctest::Approx(imp).epsilon(1e-15));
    CHECK(w.distance == doctest::Approx(dist).epsilon(1e-15));
    CHECK(w.balance == 50.0);
    CHECK(w.limits == 25.0);
    CHECK(w.delta == 1.0);
  };
  check(0.0, 10, 100, 0, 0);
  check(1.0, 1, 300, 50, 30);
  check(0.5, 5, 200, 25, 15);
  check(0.95, 1, 290, 47.5, 28.5);  // w_fm floors at 1
}

TEST_CASE("rollout projection names") {
  for (auto m : {RolloutProjection::kNone, RolloutProjection::kSoft, RolloutProjection::kHard}) {
    CHECK(parse_rollout_projection(to_string(m)) == m);
  }
  CHECK_THROWS(parse_rollout_projection("sideways"));
}

TEST_CASE("stage-2 loss special inputs") {
  const auto sys = build_case30();
  const auto batch = oracle_batch(sys, 6, 8);
  Eigen::VectorXd t = Eigen::VectorXd::Constant(6, 0.5);
  ConstantField zero(Matrix::Zero(1, 6));
  Tape tape;
  SUBCASE("refined = p1 = p0 under a zero field") {
    const auto loss = stage2_loss(tape, zero, batch.optimal, batch.optimal, t, batch.total, sys,
                                  stage2_weights(1.0), {20, RolloutProjection::kNone, {}});
    CHECK(loss.terms.fm == 0.0);
    CHECK(loss.terms.distance == 0.0);
    CHECK(loss.terms.improve == doctest::Approx(1.0));
    CHECK(loss.terms.cost == doctest::Approx(batch.cost.mean()).epsilon(1e-12));
    const auto w = stage2_weights(1.0);
    CHECK(loss.terms.total == doctest::Approx(w.cost * loss.terms.cost + w.improve * 1.0 +
                                              w.balance * loss.terms.balance)
                                  .epsilon(1e-12));
  }
  SUBCASE("refined much cheaper than the start") {
    std::mt19937_64 rng(8);
    const Matrix p0 = noisy_start(sys, batch.total, rng);
    ConstantField oracle(batch.optimal - p0);
    const auto loss = stage2_loss(tape, oracle, p0, batch.optimal, t, batch.total, sys,
                                  stage2_weights(1.0), {20, RolloutProjection::kNone, {}});
    CHECK(loss.terms.improve == 0.0);
    CHECK(loss.terms.distance < 1e-20);
    CHECK(loss.terms.fm == 0.0);
  }
  SUBCASE("only the balance weight, balanced endpoint") {
    Stage2Weights w;
    w.balance = 50.0;
    const auto loss = stage2_loss(tape, zero, batch.optimal, batch.optimal, t, batch.total, sys, w,
                                  {20, RolloutProjection::kNone, {}});
    CHECK(loss.terms.total < 1e-18);
  }
  CHECK_THROWS_AS(stage2_loss(tape, zero, Matrix::Zero(0, 6), Matrix::Zero(0, 6), Eigen::VectorXd(),
                              Eigen::VectorXd(), sys, stage2_weights(0)),
                  DimensionError);
}

TEST_CASE("stage-2 gradients") {
  const auto sys = build_case30();
  const auto batch = oracle_batch(sys, 4, 9);
  std::mt19937_64 rng(9);
  const Matrix p0 = noisy_start(sys, batch.total, rng);
  Eigen::VectorXd t(4);
  t << 0.2, 0.4, 0.6, 0.8;
  VectorFieldModel model(sys, {32, 2, 0.3}, 10);
  SUBCASE("flow-matching loss") {
    const auto rep = ref::check_parameter_gradients(
        model.parameters().all(),
        [&](Tape& tape) { return fm_loss(tape, model, p0, batch.optimal, t, batch.total); }, 1e-6, 0);
    CHECK(rep.max_rel_error < 1e-4);
  }
  for (auto mode : {RolloutProjection::kNone, RolloutProjection::kSoft, RolloutProjection::kHard}) {
    CAPTURE(to_string(mode));
    const auto rep = ref::check_parameter_gradients(
        model.parameters().all(),
        [&](Tape& tape) {
          return stage2_loss(tape, model, p0, batch.optimal, t, batch.total, sys, stage2_weights(0.5),
                             {5, mode, {}})
              .total;
        },
        1e-5, 2, 31);
    CHECK(rep.checked >= 20);
    CHECK(rep.max_rel_error < 1e-4);
  }
  SUBCASE("through the rollout state") {
    // Interior, balanced starts so no clamp sits on a kink.
    Matrix start(4, 6);
    for (Eigen::Index r = 0; r < 4; ++r) {
      const double frac = (batch.total[r] - 117.0) / 318.0;
      start.row(r) = (sys.p_min() + frac * (sys.p_max() - sys.p_min())).transpose();
    }
    LinearField field(random_matrix(6, 6, rng, -0.05, 0.05), random_matrix(1, 6, rng, -3, 3));
    // A plain sum would be nearly constant: balancing pins it to the load.
    const Matrix probe = random_matrix(4, 6, rng, -1, 1);
    // The soft clamp steepens around mid-range, so iterating it saturates
    // the state; a single soft step is the meaningful check for that mode.
    const std::vector<std::pair<RolloutProjection, int>> runs = {
        {RolloutProjection::kNone, 8}, {RolloutProjection::kSoft, 1}, {RolloutProjection::kHard, 8}};
    for (const auto& [mode, steps] : runs) {
      CAPTURE(to_string(mode));
      const auto rep = ref::check_input_gradient(
          start,
          [&](Tape& tape, Var x) {
            const Var out = rollout(tape, field, x, batch.total, sys, steps, mode);
            return ad::sum_all(ad::mul(out, tape.constant(probe)));
          },
          1e-4);
      CHECK(rep.max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("stage-2 training") {
  const auto sys = build_case30();
  const auto data = stack(generate(sys, {"t", 0.7, 1.0, 48}, 12));
  GnnModel gnn(sys, {32, 16}, 1);
  Stage1Config s1;
  s1.epochs = 3;
  s1.batch_size = 16;
  train_stage1(gnn, data, s1);
  const Matrix before = gnn.predict(data.loads);
  const auto gnn_params = gnn.parameters().get("head1.weight").value;

  VectorFieldModel field(sys, {32, 1, 0.01}, 2);
  Stage2Config cfg;
  cfg.epochs = 12;
  cfg.batch_size = 16;
  cfg.rollout.n_steps = 4;
  cfg.seed = 5;
  const auto logs = train_stage2(field, gnn, data, cfg);
  REQUIRE(logs.size() == 12);
  CHECK(gnn.parameters().get("head1.weight").value == gnn_params);
  CHECK(gnn.predict(data.loads) == before);
  const auto& l = logs[9];
  CHECK(l.epoch == 10);
  CHECK(l.rho == 0.5);
  const auto w = stage2_weights(0.5);
  CHECK(l.weights.fm == w.fm);
  CHECK(l.weights.cost == w.cost);
  CHECK(l.weights.improve == w.improve);
  CHECK(l.weights.distance == w.distance);
  CHECK(logs[0].lr == doctest::Approx(cfg.lr));
  CHECK(logs.back().lr < logs[0].lr);
  for (const auto& e : logs) CHECK(std::isfinite(e.mean_terms.total));

  VectorFieldModel again(sys, {32, 1, 0.01}, 2);
  cfg.epochs = 2;
  const auto a = train_stage2(again, gnn, data, cfg);
  VectorFieldModel third(sys, {32, 1, 0.01}, 2);
  const auto b = train_stage2(third, gnn, data, cfg);
  CHECK(a[0].mean_terms.total == b[0].mean_terms.total);
}
