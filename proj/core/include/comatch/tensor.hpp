#pragma once

// Dense rank-2 tensors with a reverse-mode differentiation tape.
//
// Vectors are stored as (n, 1) column matrices. A Tensor is a cheap handle:
// copies alias the same storage, so gradients accumulate on the shared node.
// Every operation takes the Tape it records onto as its first argument.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace comatch::tensor {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Boolean mask with the same layout as the tensor it applies to (or a single
// axis of it); nonzero means "real entry".
using Mask = std::vector<std::uint8_t>;

class Tape;

struct TensorNode {
  Matrix value;
  Matrix grad;  // allocated iff requires_grad
  bool requires_grad = false;
  const Tape* producer = nullptr;  // null for leaves
};

class Tensor {
 public:
  Tensor() = default;

  // Leaf that never receives a gradient.
  static Tensor constant(Matrix value);
  // Leaf with a gradient buffer (a learnable parameter).
  static Tensor parameter(Matrix value);
  static Tensor zeros(std::ptrdiff_t rows, std::ptrdiff_t cols);

  bool defined() const { return node_ != nullptr; }
  std::ptrdiff_t rows() const { return node_->value.rows(); }
  std::ptrdiff_t cols() const { return node_->value.cols(); }
  std::ptrdiff_t size() const { return node_->value.size(); }

  const Matrix& value() const { return node_->value; }
  // Mutable access for optimizers and gradient checks. Never call while a
  // tape that read this tensor is still going to run backward.
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->producer == nullptr; }
  const Matrix& grad() const;
  Matrix& mutable_grad() const;
  void zero_grad();

  // Value of a 1x1 tensor.
  double item() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  std::string shape_string() const;

  // Deep copy of the value into a new leaf with the same requires_grad flag.
  Tensor detached_copy() const;

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  std::shared_ptr<TensorNode> node_;

  friend class Tape;
};

// Records executed operations; backward() replays them in reverse.
// A tape belongs to one thread. Leaves (parameters) may be shared between
// tapes only if nobody runs backward on more than one of them at a time.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Creates an op output. It requires a gradient iff any input does.
  Tensor make_output(Matrix value, std::initializer_list<const Tensor*> inputs);
  Tensor make_output(Matrix value, bool requires_grad);

  // Registers the backward rule for the op that produced the latest outputs.
  void record(std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
  // Gradients of intermediate outputs are reset first; leaf gradients
  // accumulate across calls.
  void backward(const Tensor& loss);

  std::size_t size() const { return ops_.size(); }
  void clear();

 private:
  std::vector<std::function<void()>> ops_;
  std::vector<std::shared_ptr<TensorNode>> outputs_;
};

// ---- operations ---------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
// m (r x c) plus bias (r x 1) repeated across every column.
Tensor add_bias_broadcast(Tape& tape, const Tensor& m, const Tensor& bias);
Tensor elementwise_sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor elementwise_mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor relu(Tape& tape, const Tensor& a);
Tensor sigmoid(Tape& tape, const Tensor& a);
Tensor tanh(Tape& tape, const Tensor& a);

// Column-wise softmax. `mask`, if non-empty, is row-major r x c; masked
// entries come out exactly 0. Every column needs at least one real entry.
Tensor softmax_columns(Tape& tape, const Tensor& m, const Mask& mask = {});

// Stacks a above b.
Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b);
// Places the inputs side by side; all must have the same row count.
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor slice_rows(Tape& tape, const Tensor& a, std::ptrdiff_t start, std::ptrdiff_t count);
Tensor slice_cols(Tape& tape, const Tensor& a, std::ptrdiff_t start, std::ptrdiff_t count);

// Per-row maximum over the columns whose mask entry is set (all columns when
// the mask is empty). The gradient goes to the lowest-index maximizing column.
Tensor row_max_pool(Tape& tape, const Tensor& m, const Mask& column_mask = {});

Tensor sum(Tape& tape, const Tensor& a);

// Gathers columns of `table` (d x V) by index into a d x T matrix.
Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids);

// -log softmax(scores)[gold] for a K x 1 score vector, via log-sum-exp.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& scores, std::size_t gold);

// Pointwise half of an LSTM step. `preactivation` is 4h x 1 in gate order
// (input, forget, cell candidate, output); returns (h_t, c_t).
std::pair<Tensor, Tensor> lstm_gates(Tape& tape, const Tensor& preactivation, const Tensor& c_prev);

}  // namespace comatch::tensor
