#include "dcopf/optim.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dcopf/error.hpp"

namespace dcopf::ad {

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    Matrix g = p.grad;
    if (config_.weight_decay != 0.0) {
      if (config_.decoupled_weight_decay) {
        p.value *= 1.0 - config_.lr * config_.weight_decay;
      } else {
        g += config_.weight_decay * p.value;
      }
    }
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p.value.array() -= config_.lr * (m_[i].array() / bias1) /
                       ((v_[i].array() / bias2).sqrt() + config_.eps);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

double cosine_anneal(double lr_base, double epoch, double total_epochs, double lr_min) {
  return lr_min +
         0.5 * (lr_base - lr_min) * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

double grad_norm(const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.precision(17);
  out << "dcopf-checkpoint 1\n";
  out << "count " << store.size() << "\n";
  for (const auto* p : store.all()) {
    out << "param " << p->name << " " << p->value.rows() << " " << p->value.cols() << "\n";
    for (Index r = 0; r < p->value.rows(); ++r) {
      for (Index c = 0; c < p->value.cols(); ++c) {
        if (c > 0) out << ' ';
        out << p->value(r, c);
      }
      out << "\n";
    }
  }
  if (!out) throw Error("failed while writing checkpoint " + path);
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open checkpoint");
  std::size_t line_no = 0;
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw ParseError(path, line_no, "unexpected end of file");
    ++line_no;
    return line;
  };

  if (next_line() != "dcopf-checkpoint 1") {
    throw ParseError(path, line_no, "missing or unsupported checkpoint header");
  }
  std::size_t count = 0;
  {
    std::istringstream is(next_line());
    std::string tag;
    if (!(is >> tag >> count) || tag != "count") throw ParseError(path, line_no, "expected count");
  }
  if (count != store.size()) {
    throw ParseError(path, line_no,
                     "checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                         std::to_string(store.size()));
  }
  for (std::size_t k = 0; k < count; ++k) {
    std::istringstream is(next_line());
    std::string tag, name;
    Index rows = 0, cols = 0;
    if (!(is >> tag >> name >> rows >> cols) || tag != "param") {
      throw ParseError(path, line_no, "expected 'param <name> <rows> <cols>'");
    }
    Parameter* target = nullptr;
    try {
      target = &store.get(name);
    } catch (const Error&) {
      throw ParseError(path, line_no, "unknown parameter '" + name + "'");
    }
    if (target->value.rows() != rows || target->value.cols() != cols) {
      throw ParseError(path, line_no, "shape mismatch for '" + name + "'");
    }
    Matrix values(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      std::istringstream row(next_line());
      for (Index c = 0; c < cols; ++c) {
        if (!(row >> values(r, c))) throw ParseError(path, line_no, "bad value in '" + name + "'");
      }
    }
    target->value = std::move(values);
    target->zero_grad();
  }
}

}  // namespace dcopf::ad
