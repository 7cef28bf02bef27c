#include "comatch/lstm.hpp"

#include "comatch/errors.hpp"

namespace comatch::tensor {

namespace {

Matrix uniform_matrix(std::ptrdiff_t rows, std::ptrdiff_t cols, double range, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-range, range);
  Matrix m(rows, cols);
  for (std::ptrdiff_t r = 0; r < rows; ++r)
    for (std::ptrdiff_t c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

}  // namespace

LstmWeights LstmWeights::init(std::ptrdiff_t input_size, std::ptrdiff_t hidden_size, double init_range,
                              std::mt19937_64& rng) {
  LstmWeights w;
  w.input_weights = Tensor::parameter(uniform_matrix(4 * hidden_size, input_size, init_range, rng));
  w.recurrent_weights = Tensor::parameter(uniform_matrix(4 * hidden_size, hidden_size, init_range, rng));
  Matrix bias = Matrix::Zero(4 * hidden_size, 1);
  bias.middleRows(hidden_size, hidden_size).setOnes();
  w.bias = Tensor::parameter(std::move(bias));
  return w;
}

std::size_t LstmWeights::parameter_count() const {
  return static_cast<std::size_t>(input_weights.size() + recurrent_weights.size() + bias.size());
}

BiLstmWeights BiLstmWeights::init(std::ptrdiff_t input_size, std::ptrdiff_t output_size, double init_range,
                                  std::mt19937_64& rng) {
  if (output_size % 2 != 0) {
    throw ConfigError("Bi-LSTM output size must be even, got " + std::to_string(output_size));
  }
  BiLstmWeights w;
  w.forward = LstmWeights::init(input_size, output_size / 2, init_range, rng);
  w.backward = LstmWeights::init(input_size, output_size / 2, init_range, rng);
  return w;
}

std::size_t BiLstmWeights::parameter_count() const {
  return forward.parameter_count() + backward.parameter_count();
}

LstmState lstm_cell(Tape& tape, const Tensor& x_t, const LstmState& prev, const LstmWeights& weights) {
  if (x_t.cols() != 1 || x_t.rows() != weights.input_size()) {
    throw DimensionError("lstm_cell: input " + x_t.shape_string() + " does not fit weights " +
                         weights.input_weights.shape_string());
  }
  if (prev.h.rows() != weights.hidden_size() || prev.c.rows() != weights.hidden_size()) {
    throw DimensionError("lstm_cell: state " + prev.h.shape_string() + " does not fit hidden size " +
                         std::to_string(weights.hidden_size()));
  }
  Tensor projected = add_bias_broadcast(tape, matmul(tape, weights.input_weights, x_t), weights.bias);
  Tensor pre = add(tape, projected, matmul(tape, weights.recurrent_weights, prev.h));
  auto [h, c] = lstm_gates(tape, pre, prev.c);
  return {h, c};
}

Tensor lstm_sequence(Tape& tape, const Tensor& x, const LstmWeights& weights, bool reverse) {
  const auto steps = x.cols();
  if (steps == 0) throw EmptySequenceError("lstm_sequence: empty input sequence");
  if (x.rows() != weights.input_size()) {
    throw DimensionError("lstm_sequence: input " + x.shape_string() + " does not fit weights " +
                         weights.input_weights.shape_string());
  }
  // The input projection for every step is one matrix product.
  Tensor projected = add_bias_broadcast(tape, matmul(tape, weights.input_weights, x), weights.bias);
  const auto hidden = weights.hidden_size();
  LstmState state{Tensor::zeros(hidden, 1), Tensor::zeros(hidden, 1)};
  std::vector<Tensor> outputs(static_cast<std::size_t>(steps));
  for (std::ptrdiff_t i = 0; i < steps; ++i) {
    const std::ptrdiff_t t = reverse ? steps - 1 - i : i;
    Tensor pre = add(tape, slice_cols(tape, projected, t, 1), matmul(tape, weights.recurrent_weights, state.h));
    auto [h, c] = lstm_gates(tape, pre, state.c);
    state = {h, c};
    outputs[static_cast<std::size_t>(t)] = h;
  }
  return concat_cols(tape, outputs);
}

Tensor bilstm_encode(Tape& tape, const Tensor& x, const BiLstmWeights& weights) {
  if (x.cols() == 0) throw EmptySequenceError("bilstm_encode: empty input sequence");
  Tensor fwd = lstm_sequence(tape, x, weights.forward, false);
  Tensor bwd = lstm_sequence(tape, x, weights.backward, true);
  return concat_rows(tape, fwd, bwd);
}

}  // namespace comatch::tensor
