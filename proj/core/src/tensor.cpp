#include "comatch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "comatch/errors.hpp"

namespace comatch::tensor {

namespace {

std::string shape_of(const Matrix& m) {
  std::ostringstream out;
  out << m.rows() << "x" << m.cols();
  return out.str();
}

[[noreturn]] void dimension_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) dimension_error(op, a, b);
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::constant(Matrix value) {
  auto node = std::make_shared<TensorNode>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Matrix value) {
  auto node = std::make_shared<TensorNode>();
  node->grad = Matrix::Zero(value.rows(), value.cols());
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::ptrdiff_t rows, std::ptrdiff_t cols) {
  return constant(Matrix::Zero(rows, cols));
}

const Matrix& Tensor::grad() const {
  if (!node_->requires_grad) throw ContractError("grad() on a tensor that does not require grad");
  return node_->grad;
}

Matrix& Tensor::mutable_grad() const {
  if (!node_->requires_grad) throw ContractError("grad() on a tensor that does not require grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.setZero();
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw ContractError("item() on non-scalar tensor " + shape_string());
  return node_->value(0, 0);
}

std::string Tensor::shape_string() const { return shape_of(node_->value); }

Tensor Tensor::detached_copy() const {
  return node_->requires_grad ? parameter(node_->value) : constant(node_->value);
}

// ---- Tape -----------------------------------------------------------------

Tensor Tape::make_output(Matrix value, std::initializer_list<const Tensor*> inputs) {
  bool needs_grad = false;
  for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  return make_output(std::move(value), needs_grad);
}

Tensor Tape::make_output(Matrix value, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->producer = this;
  node->requires_grad = requires_grad;
  if (requires_grad) {
    node->grad = Matrix::Zero(value.rows(), value.cols());
    outputs_.push_back(node);
  }
  node->value = std::move(value);
  return Tensor(std::move(node));
}

void Tape::record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("backward: loss must be a 1x1 tensor, got " +
                        (loss.defined() ? loss.shape_string() : std::string("undefined")));
  }
  if (loss.node_->producer != this) throw ContractError("backward: loss was not produced on this tape");
  if (!loss.requires_grad()) return;
  for (auto& node : outputs_) node->grad.setZero();
  loss.node_->grad(0, 0) = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::clear() {
  ops_.clear();
  outputs_.clear();
}

// ---- operations -----------------------------------------------------------
//
// Each op computes its value eagerly and, if the output needs a gradient,
// records a closure that pushes the output gradient into its inputs.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) dimension_error("matmul", a, b);
  Matrix value(a.rows(), b.cols());
  value.noalias() = a.value() * b.value();
  Tensor out = tape.make_output(std::move(value), {&a, &b});
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const Matrix& g = out.grad();
      if (a.requires_grad()) a.mutable_grad().noalias() += g * b.value().transpose();
      if (b.requires_grad()) b.mutable_grad().noalias() += a.value().transpose() * g;
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  Tensor out = tape.make_output(a.value().transpose(), {&a});
  if (out.requires_grad()) {
    tape.record([a, out]() mutable { a.mutable_grad() += out.grad().transpose(); });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = tape.make_output(a.value() + b.value(), {&a, &b});
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.mutable_grad() += out.grad();
      if (b.requires_grad()) b.mutable_grad() += out.grad();
    });
  }
  return out;
}

Tensor add_bias_broadcast(Tape& tape, const Tensor& m, const Tensor& bias) {
  if (bias.cols() != 1 || bias.rows() != m.rows()) dimension_error("add_bias_broadcast", m, bias);
  Matrix value = m.value();
  value.colwise() += bias.value().col(0);
  Tensor out = tape.make_output(std::move(value), {&m, &bias});
  if (out.requires_grad()) {
    tape.record([m, bias, out]() mutable {
      if (m.requires_grad()) m.mutable_grad() += out.grad();
      if (bias.requires_grad()) bias.mutable_grad().col(0) += out.grad().rowwise().sum();
    });
  }
  return out;
}

Tensor elementwise_sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("elementwise_sub", a, b);
  Tensor out = tape.make_output(a.value() - b.value(), {&a, &b});
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.mutable_grad() += out.grad();
      if (b.requires_grad()) b.mutable_grad() -= out.grad();
    });
  }
  return out;
}

Tensor elementwise_mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("elementwise_mul", a, b);
  Tensor out = tape.make_output(a.value().cwiseProduct(b.value()), {&a, &b});
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const Matrix& g = out.grad();
#ifdef COMATCH_INJECT_GRAD_FAULT
      // Negative-control build: deliberately wrong rule for the left operand.
      if (a.requires_grad()) a.mutable_grad() += 1.5 * g.cwiseProduct(b.value());
#else
      if (a.requires_grad()) a.mutable_grad() += g.cwiseProduct(b.value());
#endif
      if (b.requires_grad()) b.mutable_grad() += g.cwiseProduct(a.value());
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor out = tape.make_output(a.value() * factor, {&a});
  if (out.requires_grad()) {
    tape.record([a, out, factor]() mutable { a.mutable_grad() += out.grad() * factor; });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out = tape.make_output(a.value().cwiseMax(0.0), {&a});
  if (out.requires_grad()) {
    tape.record([a, out]() mutable {
      // Subgradient at exactly 0 is 0.
      a.mutable_grad() += (a.value().array() > 0.0).select(out.grad().array(), 0.0).matrix();
    });
  }
  return out;
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
  Matrix value = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Tensor out = tape.make_output(std::move(value), {&a});
  if (out.requires_grad()) {
    tape.record([a, out]() mutable {
      const auto y = out.value().array();
      a.mutable_grad().array() += out.grad().array() * y * (1.0 - y);
    });
  }
  return out;
}

Tensor tanh(Tape& tape, const Tensor& a) {
  Tensor out = tape.make_output(a.value().array().tanh().matrix(), {&a});
  if (out.requires_grad()) {
    tape.record([a, out]() mutable {
      const auto y = out.value().array();
      a.mutable_grad().array() += out.grad().array() * (1.0 - y * y);
    });
  }
  return out;
}

Tensor softmax_columns(Tape& tape, const Tensor& m, const Mask& mask) {
  const auto rows = m.rows();
  const auto cols = m.cols();
  if (!mask.empty() && static_cast<std::ptrdiff_t>(mask.size()) != rows * cols) {
    throw DimensionError("softmax_columns: mask has " + std::to_string(mask.size()) +
                         " entries for a " + m.shape_string() + " tensor");
  }
  auto live = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
    return mask.empty() || mask[static_cast<std::size_t>(r * cols + c)] != 0;
  };
  const Matrix& x = m.value();
  Matrix y = Matrix::Zero(rows, cols);
  for (std::ptrdiff_t c = 0; c < cols; ++c) {
    double peak = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      if (!live(r, c)) continue;
      any = true;
      peak = std::max(peak, x(r, c));
    }
    if (!any) {
      throw DegenerateMaskError("softmax_columns: column " + std::to_string(c) + " is fully masked");
    }
    double total = 0.0;
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      if (!live(r, c)) continue;
      y(r, c) = std::exp(x(r, c) - peak);
      total += y(r, c);
    }
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      if (live(r, c)) y(r, c) /= total;
    }
  }
  Tensor out = tape.make_output(std::move(y), {&m});
  if (out.requires_grad()) {
    tape.record([m, out]() mutable {
      const Matrix& y = out.value();
      const Matrix& g = out.grad();
      // dx = y * (g - <g, y>) per column; masked entries have y = 0.
      Eigen::RowVectorXd inner = g.cwiseProduct(y).colwise().sum();
      Matrix centered = g;
      centered.rowwise() -= inner;
      m.mutable_grad() += y.cwiseProduct(centered);
    });
  }
  return out;
}

Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) dimension_error("concat_rows", a, b);
  Matrix value(a.rows() + b.rows(), a.cols());
  value.topRows(a.rows()) = a.value();
  value.bottomRows(b.rows()) = b.value();
  Tensor out = tape.make_output(std::move(value), {&a, &b});
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.mutable_grad() += out.grad().topRows(a.rows());
      if (b.requires_grad()) b.mutable_grad() += out.grad().bottomRows(b.rows());
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const auto rows = parts.front().rows();
  std::ptrdiff_t cols = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) dimension_error("concat_cols", parts.front(), p);
    cols += p.cols();
    needs_grad = needs_grad || p.requires_grad();
  }
  Matrix value(rows, cols);
  std::ptrdiff_t offset = 0;
  for (const Tensor& p : parts) {
    value.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  Tensor out = tape.make_output(std::move(value), needs_grad);
  if (needs_grad) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape.record([inputs = std::move(inputs), out]() mutable {
      std::ptrdiff_t at = 0;
      for (Tensor& p : inputs) {
        if (p.requires_grad()) p.mutable_grad() += out.grad().middleCols(at, p.cols());
        at += p.cols();
      }
    });
  }
  return out;
}

Tensor slice_rows(Tape& tape, const Tensor& a, std::ptrdiff_t start, std::ptrdiff_t count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " + a.shape_string());
  }
  Tensor out = tape.make_output(a.value().middleRows(start, count), {&a});
  if (out.requires_grad()) {
    tape.record([a, out, start, count]() mutable {
      a.mutable_grad().middleRows(start, count) += out.grad();
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, const Tensor& a, std::ptrdiff_t start, std::ptrdiff_t count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " + a.shape_string());
  }
  Tensor out = tape.make_output(a.value().middleCols(start, count), {&a});
  if (out.requires_grad()) {
    tape.record([a, out, start, count]() mutable {
      a.mutable_grad().middleCols(start, count) += out.grad();
    });
  }
  return out;
}

Tensor row_max_pool(Tape& tape, const Tensor& m, const Mask& column_mask) {
  const auto rows = m.rows();
  const auto cols = m.cols();
  if (cols == 0) throw DegenerateMaskError("row_max_pool: input has no columns");
  if (!column_mask.empty() && static_cast<std::ptrdiff_t>(column_mask.size()) != cols) {
    throw DimensionError("row_max_pool: mask has " + std::to_string(column_mask.size()) +
                         " entries for " + std::to_string(cols) + " columns");
  }
  if (!column_mask.empty() &&
      std::none_of(column_mask.begin(), column_mask.end(), [](std::uint8_t v) { return v != 0; })) {
    throw DegenerateMaskError("row_max_pool: every column is masked");
  }
  const Matrix& x = m.value();
  Matrix value(rows, 1);
  std::vector<std::ptrdiff_t> argmax(static_cast<std::size_t>(rows), -1);
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
      if (!column_mask.empty() && column_mask[static_cast<std::size_t>(c)] == 0) continue;
      auto& best = argmax[static_cast<std::size_t>(r)];
      if (best < 0 || x(r, c) > x(r, best)) best = c;  // strict: first maximizer wins
    }
    value(r, 0) = x(r, argmax[static_cast<std::size_t>(r)]);
  }
  Tensor out = tape.make_output(std::move(value), {&m});
  if (out.requires_grad()) {
    tape.record([m, out, argmax = std::move(argmax)]() mutable {
      Matrix& g = m.mutable_grad();
      for (std::size_t r = 0; r < argmax.size(); ++r) {
        g(static_cast<std::ptrdiff_t>(r), argmax[r]) += out.grad()(static_cast<std::ptrdiff_t>(r), 0);
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  Matrix value(1, 1);
  value(0, 0) = a.value().sum();
  Tensor out = tape.make_output(std::move(value), {&a});
  if (out.requires_grad()) {
    tape.record([a, out]() mutable { a.mutable_grad().array() += out.grad()(0, 0); });
  }
  return out;
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids) {
  Matrix value(table.rows(), static_cast<std::ptrdiff_t>(ids.size()));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= table.cols()) {
      throw ContractError("embedding_lookup: index " + std::to_string(ids[t]) +
                          " outside vocabulary of size " + std::to_string(table.cols()));
    }
    value.col(static_cast<std::ptrdiff_t>(t)) = table.value().col(ids[t]);
  }
  Tensor out = tape.make_output(std::move(value), {&table});
  if (out.requires_grad()) {
    std::vector<int> index(ids.begin(), ids.end());
    tape.record([table, out, index = std::move(index)]() mutable {
      Matrix& g = table.mutable_grad();
      for (std::size_t t = 0; t < index.size(); ++t) {
        g.col(index[t]) += out.grad().col(static_cast<std::ptrdiff_t>(t));
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& scores, std::size_t gold) {
  if (scores.cols() != 1) throw DimensionError("softmax_cross_entropy: scores must be K x 1, got " + scores.shape_string());
  if (static_cast<std::ptrdiff_t>(gold) >= scores.rows()) {
    throw ContractError("softmax_cross_entropy: gold index " + std::to_string(gold) + " >= K = " +
                        std::to_string(scores.rows()));
  }
  const auto s = scores.value().col(0).array();
  const double peak = s.maxCoeff();
  const double log_total = peak + std::log((s - peak).exp().sum());
  Matrix value(1, 1);
  value(0, 0) = log_total - s(static_cast<std::ptrdiff_t>(gold));
  Tensor out = tape.make_output(std::move(value), {&scores});
  if (out.requires_grad()) {
    tape.record([scores, out, gold, log_total]() mutable {
      Eigen::VectorXd p = (scores.value().col(0).array() - log_total).exp().matrix();
      p(static_cast<std::ptrdiff_t>(gold)) -= 1.0;
      scores.mutable_grad().col(0) += out.grad()(0, 0) * p;
    });
  }
  return out;
}

std::pair<Tensor, Tensor> lstm_gates(Tape& tape, const Tensor& preactivation, const Tensor& c_prev) {
  const auto h = c_prev.rows();
  if (c_prev.cols() != 1 || preactivation.cols() != 1 || preactivation.rows() != 4 * h) {
    dimension_error("lstm_gates", preactivation, c_prev);
  }
  const auto z = preactivation.value().col(0).array();
  auto logistic = [](const auto& v) { return 1.0 / (1.0 + (-v).exp()); };
  Eigen::ArrayXd in = logistic(z.segment(0, h));
  Eigen::ArrayXd forget = logistic(z.segment(h, h));
  Eigen::ArrayXd cand = z.segment(2 * h, h).tanh();
  Eigen::ArrayXd outg = logistic(z.segment(3 * h, h));
  Eigen::ArrayXd c = forget * c_prev.value().col(0).array() + in * cand;
  Eigen::ArrayXd tc = c.tanh();

  const bool needs_grad = preactivation.requires_grad() || c_prev.requires_grad();
  Tensor h_out = tape.make_output(Matrix((outg * tc).matrix()), needs_grad);
  Tensor c_out = tape.make_output(Matrix(c.matrix()), needs_grad);
  if (needs_grad) {
    tape.record([preactivation, c_prev, h_out, c_out, in, forget, cand, outg, tc, h]() mutable {
      const Eigen::ArrayXd dh = h_out.grad().col(0).array();
      const Eigen::ArrayXd dc = c_out.grad().col(0).array() + dh * outg * (1.0 - tc * tc);
      if (preactivation.requires_grad()) {
        auto dz = preactivation.mutable_grad().col(0).array();
        dz.segment(0, h) += dc * cand * in * (1.0 - in);
        dz.segment(h, h) += dc * c_prev.value().col(0).array() * forget * (1.0 - forget);
        dz.segment(2 * h, h) += dc * in * (1.0 - cand * cand);
        dz.segment(3 * h, h) += dh * tc * outg * (1.0 - outg);
      }
      if (c_prev.requires_grad()) c_prev.mutable_grad().col(0).array() += dc * forget;
    });
  }
  return {h_out, c_out};
}

}  // namespace comatch::tensor
