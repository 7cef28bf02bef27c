#pragma once

#include <random>
#include <string>
#include <vector>

#include "comatch/tensor.hpp"

namespace comatch::tensor {

// One LSTM direction without peepholes. Gate rows are stacked in the order
// input, forget, cell candidate, output.
struct LstmWeights {
  Tensor input_weights;      // 4h x d
  Tensor recurrent_weights;  // 4h x h
  Tensor bias;               // 4h x 1

  std::ptrdiff_t input_size() const { return input_weights.cols(); }
  std::ptrdiff_t hidden_size() const { return recurrent_weights.cols(); }

  // Weights uniform in [-init_range, init_range], biases zero except the
  // forget gate which starts at 1.
  static LstmWeights init(std::ptrdiff_t input_size, std::ptrdiff_t hidden_size, double init_range,
                          std::mt19937_64& rng);
  std::size_t parameter_count() const;
};

struct BiLstmWeights {
  LstmWeights forward;
  LstmWeights backward;

  // Output width is 2 * per-direction hidden size.
  static BiLstmWeights init(std::ptrdiff_t input_size, std::ptrdiff_t output_size, double init_range,
                            std::mt19937_64& rng);
  std::ptrdiff_t output_size() const { return 2 * forward.hidden_size(); }
  std::size_t parameter_count() const;
};

struct LstmState {
  Tensor h;
  Tensor c;
};

// Single step: gates = W_x x_t + b + W_h h_prev, then the standard update.
LstmState lstm_cell(Tape& tape, const Tensor& x_t, const LstmState& prev, const LstmWeights& weights);

// Runs one direction over the columns of x (d x T) and returns the h x T
// matrix of hidden states in input order. `reverse` walks t = T-1 .. 0.
Tensor lstm_sequence(Tape& tape, const Tensor& x, const LstmWeights& weights, bool reverse);

// Column t of the result is [forward h_t ; backward h_t].
Tensor bilstm_encode(Tape& tape, const Tensor& x, const BiLstmWeights& weights);

}  // namespace comatch::tensor
