#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//
// Every value is a row-major matrix; by convention rows index the batch and
// columns index features. A Tape records one forward pass and is discarded
// after backward(); parameters live outside the tape in a ParameterStore and
// receive accumulated gradients.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dcopf::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Owns named parameters with stable addresses.
class ParameterStore {
 public:
  Parameter& add(std::string name, Matrix init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  /// Gradient after Tape::backward; zeros when no gradient reached the node.
  Matrix grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  /// With grad disabled, parameters enter as constants and no closures are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(double value);
  /// Leaf whose gradient is kept on the tape (for tests and input sensitivities).
  Var variable(Matrix value);
  Var parameter(Parameter& p);

  /// Seeds d(loss)/d(loss) = 1 and propagates; parameter gradients are added
  /// to Parameter::grad. Throws NonFiniteError on a non-finite loss.
  void backward(Var loss);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Matrix value, bool requires_grad, BackwardFn backward);
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient accumulator of node `id`, zero-initialised on first access.
  Matrix& grad_ref(std::size_t id);
  const Matrix* grad_ptr(std::size_t id) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

// Linear algebra
Var matmul(Var a, Var b);
/// x * W + b, with b a 1 x n row broadcast over rows.
Var linear(Var x, Var weight, Var bias);
/// For each consecutive block of `block_rows` rows: out_block = m * a_block.
Var block_left_multiply(Var a, const Matrix& m, Index block_rows);

// Elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var shift(Var a, double s);
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
Var add_col(Var a, Var col);
Var mul_col(Var a, Var col);
Var relu(Var a);
Var silu(Var a);
Var sigmoid(Var a);
Var sin(Var a);
Var cos(Var a);
Var square(Var a);
/// Hard clamp to per-column bounds; gradient passes where lo <= a <= hi.
Var clamp(Var a, const RowVector& lo, const RowVector& hi);

// Reductions
Var sum_cols(Var a);       // rows x 1
Var mean_cols(Var a);      // rows x 1
Var variance_cols(Var a);  // rows x 1, population variance
Var sum_all(Var a);        // 1 x 1
Var mean_all(Var a);       // 1 x 1

// Structure
/// Row-wise layer normalisation followed by the affine map gamma, beta (1 x n).
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var a, const std::vector<Index>& rows);
/// Row-major reinterpretation; rows * cols must equal the element count.
Var reshape(Var a, Index rows, Index cols);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace dcopf::ad
