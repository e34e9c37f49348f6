#include "dcopf/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include "dcopf/error.hpp"

namespace dcopf::ad {

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(std::string name, Matrix init) {
  for (const auto& p : params_) {
    if (p->name == name) throw Error("duplicate parameter name: " + name);
  }
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = std::move(init);
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw Error("unknown parameter: " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw Error("unknown parameter: " + name);
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const { return tape_->value(id_); }

Matrix Var::grad() const {
  const Matrix* g = tape_->grad_ptr(id_);
  if (g == nullptr) return Matrix::Zero(rows(), cols());
  return *g;
}

double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw DimensionError("item() on a non-scalar value");
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) { return record(std::move(value), false, nullptr); }

Var Tape::constant(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = grad_enabled_ ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_ref(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  return n.grad;
}

const Matrix* Tape::grad_ptr(std::size_t id) const {
  const auto& n = nodes_[id];
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw Error("loss belongs to a different tape");
  const auto& v = loss.value();
  if (v.size() != 1) throw DimensionError("backward() needs a scalar loss");
  if (!std::isfinite(v(0, 0))) throw NonFiniteError("loss", "value is not finite");
  if (!nodes_[loss.id()].requires_grad) return;
  grad_ref(loss.id())(0, 0) += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) {
        n.param->zero_grad();
      }
      n.param->grad += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw Error("operands live on different tapes");
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                         "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()) + ")");
  }
}

bool any_grad(Var a) { return a.requires_grad(); }
bool any_grad(Var a, Var b) { return a.requires_grad() || b.requires_grad(); }

// Elementwise unary op with derivative computed from input and output values.
template <typename Forward, typename Derivative>
Var unary(Var a, Forward f, Derivative df) {
  Tape& t = *a.tape();
  Matrix out = a.value().unaryExpr(f);
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a), [ia, df](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    tp.grad_ref(ia).array() += g.array() * x.unaryExpr(df).array();
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.grad_ref(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.requires_grad(ib)) tp.grad_ref(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_same_tape(x, weight);
  require_same_tape(x, bias);
  if (x.cols() != weight.rows()) throw DimensionError("linear: input width mismatch");
  if (bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw DimensionError("linear: bias must be 1 x out");
  }
  Tape& t = *x.tape();
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  const auto ix = x.id();
  const auto iw = weight.id();
  const auto ib = bias.id();
  const bool req = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  return t.record(std::move(out), req, [ix, iw, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ix)) tp.grad_ref(ix).noalias() += g * tp.value(iw).transpose();
    if (tp.requires_grad(iw)) tp.grad_ref(iw).noalias() += tp.value(ix).transpose() * g;
    if (tp.requires_grad(ib)) tp.grad_ref(ib) += g.colwise().sum();
  });
}

Var block_left_multiply(Var a, const Matrix& m, Index block_rows) {
  if (m.rows() != block_rows || m.cols() != block_rows) {
    throw DimensionError("block_left_multiply: operator must be block_rows x block_rows");
  }
  if (block_rows <= 0 || a.rows() % block_rows != 0) {
    throw DimensionError("block_left_multiply: rows are not a multiple of the block size");
  }
  Tape& t = *a.tape();
  const Index blocks = a.rows() / block_rows;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index b = 0; b < blocks; ++b) {
    out.middleRows(b * block_rows, block_rows).noalias() =
        m * x.middleRows(b * block_rows, block_rows);
  }
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a),
                  [ia, m, block_rows, blocks](Tape& tp, const Matrix& g) {
                    Matrix& ga = tp.grad_ref(ia);
                    const Matrix mt = m.transpose();
                    for (Index b = 0; b < blocks; ++b) {
                      ga.middleRows(b * block_rows, block_rows).noalias() +=
                          mt * g.middleRows(b * block_rows, block_rows);
                    }
                  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  Matrix out = a.value() + b.value();
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.requires_grad(ib)) tp.grad_ref(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  Matrix out = a.value() - b.value();
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.requires_grad(ib)) tp.grad_ref(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseProduct(b.value());
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.grad_ref(ia) += g.cwiseProduct(tp.value(ib));
    if (tp.requires_grad(ib)) tp.grad_ref(ib) += g.cwiseProduct(tp.value(ia));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  Matrix out = a.value() * s;
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a),
                  [ia, s](Tape& tp, const Matrix& g) { tp.grad_ref(ia) += g * s; });
}

Var shift(Var a, double s) {
  Tape& t = *a.tape();
  Matrix out = a.value().array() + s;
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a),
                  [ia](Tape& tp, const Matrix& g) { tp.grad_ref(ia) += g; });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: shape mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const auto ia = a.id();
  const auto ir = row.id();
  return t.record(std::move(out), any_grad(a, row), [ia, ir](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.requires_grad(ir)) tp.grad_ref(ir) += g.colwise().sum();
  });
}

Var mul_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("mul_row: shape mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  const auto ia = a.id();
  const auto ir = row.id();
  return t.record(std::move(out), any_grad(a, row), [ia, ir](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) {
      tp.grad_ref(ia).array() += g.array().rowwise() * tp.value(ir).row(0).array();
    }
    if (tp.requires_grad(ir)) {
      tp.grad_ref(ir) += g.cwiseProduct(tp.value(ia)).colwise().sum();
    }
  });
}

Var add_col(Var a, Var col) {
  require_same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw DimensionError("add_col: shape mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value();
  out.colwise() += col.value().col(0);
  const auto ia = a.id();
  const auto ic = col.id();
  return t.record(std::move(out), any_grad(a, col), [ia, ic](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.requires_grad(ic)) tp.grad_ref(ic) += g.rowwise().sum();
  });
}

Var mul_col(Var a, Var col) {
  require_same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw DimensionError("mul_col: shape mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  const auto ia = a.id();
  const auto ic = col.id();
  return t.record(std::move(out), any_grad(a, col), [ia, ic](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) {
      tp.grad_ref(ia).array() += g.array().colwise() * tp.value(ic).col(0).array();
    }
    if (tp.requires_grad(ic)) {
      tp.grad_ref(ic) += g.cwiseProduct(tp.value(ia)).rowwise().sum();
    }
  });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {

// Logistic function through Eigen's vectorised exp. Large negative inputs
// give exp(-x) = inf and a clean 0.
Matrix logistic(const Matrix& x) {
  return (1.0 + (-x.array()).exp()).inverse().matrix();
}

}  // namespace

Var silu(Var a) {
  Tape& t = *a.tape();
  Matrix s = logistic(a.value());
  Matrix out = (a.value().array() * s.array()).matrix();
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a), [ia, s = std::move(s)](Tape& tp, const Matrix& g) {
    const auto x = tp.value(ia).array();
    tp.grad_ref(ia).array() += g.array() * s.array() * (1.0 + x * (1.0 - s.array()));
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  Matrix out = logistic(a.value());
  const auto ia = a.id();
  const auto iout = t.size();
  return t.record(std::move(out), any_grad(a), [ia, iout](Tape& tp, const Matrix& g) {
    const auto s = tp.value(iout).array();
    tp.grad_ref(ia).array() += g.array() * s * (1.0 - s);
  });
}

Var sin(Var a) {
  return unary(
      a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(
      a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var clamp(Var a, const RowVector& lo, const RowVector& hi) {
  if (lo.size() != a.cols() || hi.size() != a.cols()) {
    throw DimensionError("clamp: bounds length mismatch");
  }
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  Matrix pass(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const double v = x(r, c);
      out(r, c) = v < lo[c] ? lo[c] : (v > hi[c] ? hi[c] : v);
      pass(r, c) = (v >= lo[c] && v <= hi[c]) ? 1.0 : 0.0;
    }
  }
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a), [ia, pass = std::move(pass)](Tape& tp,
                                                                              const Matrix& g) {
    tp.grad_ref(ia) += g.cwiseProduct(pass);
  });
}

Var sum_cols(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().rowwise().sum();
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a), [ia](Tape& tp, const Matrix& g) {
    tp.grad_ref(ia).colwise() += g.col(0);
  });
}

Var mean_cols(Var a) {
  const double n = static_cast<double>(a.cols());
  return scale(sum_cols(a), 1.0 / n);
}

Var variance_cols(Var a) {
  Tape& t = *a.tape();
  const double n = static_cast<double>(a.cols());
  Matrix centered = a.value();
  const Eigen::VectorXd mean = centered.rowwise().mean();
  centered.colwise() -= mean;
  Matrix out = centered.rowwise().squaredNorm() / n;
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a),
                  [ia, n, centered = std::move(centered)](Tape& tp, const Matrix& g) {
                    tp.grad_ref(ia).array() +=
                        (centered.array().colwise() * g.col(0).array()) * (2.0 / n);
                  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a),
                  [ia](Tape& tp, const Matrix& g) { tp.grad_ref(ia).array() += g(0, 0); });
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  require_same_tape(a, gamma);
  require_same_tape(a, beta);
  const Index d = a.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw DimensionError("layer_norm: affine parameters must be 1 x width");
  }
  Tape& t = *a.tape();
  Matrix normalized = a.value();
  const Eigen::VectorXd mean = normalized.rowwise().mean();
  normalized.colwise() -= mean;
  const Eigen::VectorXd inv_std =
      ((normalized.rowwise().squaredNorm() / static_cast<double>(d)).array() + eps).rsqrt();
  normalized.array().colwise() *= inv_std.array();
  Matrix out = normalized.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);

  const auto ia = a.id();
  const auto ig = gamma.id();
  const auto ib = beta.id();
  const bool req = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return t.record(
      std::move(out), req,
      [ia, ig, ib, d, normalized = std::move(normalized), inv_std](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(ig)) tp.grad_ref(ig) += g.cwiseProduct(normalized).colwise().sum();
        if (tp.requires_grad(ib)) tp.grad_ref(ib) += g.colwise().sum();
        if (tp.requires_grad(ia)) {
          Matrix gx = g.array().rowwise() * tp.value(ig).row(0).array();
          const Eigen::VectorXd mean_g = gx.rowwise().mean();
          const Eigen::VectorXd mean_gx =
              gx.cwiseProduct(normalized).rowwise().sum() / static_cast<double>(d);
          gx.colwise() -= mean_g;
          gx -= (normalized.array().colwise() * mean_gx.array()).matrix();
          gx.array().colwise() *= inv_std.array();
          tp.grad_ref(ia) += gx;
        }
      });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool req = false;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
    req = req || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Index>> layout;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    layout.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return t.record(std::move(out), req, [layout](Tape& tp, const Matrix& g) {
    for (const auto& [id, off] : layout) {
      if (tp.requires_grad(id)) {
        tp.grad_ref(id) += g.middleCols(off, tp.value(id).cols());
      }
    }
  });
}

Var gather_rows(Var a, const std::vector<Index>& rows) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(r)) = x.row(rows[r]);
  }
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a), [ia, rows](Tape& tp, const Matrix& g) {
    Matrix& ga = tp.grad_ref(ia);
    for (std::size_t r = 0; r < rows.size(); ++r) ga.row(rows[r]) += g.row(static_cast<Index>(r));
  });
}

Var reshape(Var a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw DimensionError("reshape: element count mismatch");
  Tape& t = *a.tape();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const auto ia = a.id();
  return t.record(std::move(out), any_grad(a), [ia](Tape& tp, const Matrix& g) {
    Matrix& ga = tp.grad_ref(ia);
    Eigen::Map<Matrix>(ga.data(), g.rows(), g.cols()) += g;
  });
}

}  // namespace dcopf::ad
