#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "comatch/errors.hpp"
#include "comatch/lstm.hpp"
#include "test_util.hpp"

namespace comatch::tensor {
namespace {

using testing::max_relative_error;
using testing::numeric_gradient;
using testing::random_matrix;

LstmWeights random_weights(std::ptrdiff_t d, std::ptrdiff_t h, std::mt19937_64& rng, double range) {
  return {Tensor::parameter(random_matrix(4 * h, d, rng, -range, range)),
          Tensor::parameter(random_matrix(4 * h, h, rng, -range, range)),
          Tensor::parameter(random_matrix(4 * h, 1, rng, -range, range))};
}

// Straight-line single step, written independently of the tape ops.
std::pair<Matrix, Matrix> oracle_step(const Matrix& x, const Matrix& h_prev, const Matrix& c_prev,
                                      const LstmWeights& w) {
  const std::ptrdiff_t h = h_prev.rows();
  Matrix z = w.input_weights.value() * x + w.recurrent_weights.value() * h_prev + w.bias.value();
  Matrix h_t(h, 1), c_t(h, 1);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::ptrdiff_t k = 0; k < h; ++k) {
    const double i = sig(z(k, 0));
    const double f = sig(z(h + k, 0));
    const double g = std::tanh(z(2 * h + k, 0));
    const double o = sig(z(3 * h + k, 0));
    c_t(k, 0) = f * c_prev(k, 0) + i * g;
    h_t(k, 0) = o * std::tanh(c_t(k, 0));
  }
  return {h_t, c_t};
}

TEST(LstmCell, ZeroWeightsAndStateGiveZeroOutput) {
  LstmWeights w{Tensor::parameter(Matrix::Zero(12, 2)), Tensor::parameter(Matrix::Zero(12, 3)),
                Tensor::parameter(Matrix::Zero(12, 1))};
  Tape tape;
  auto s = lstm_cell(tape, Tensor::constant(Matrix::Constant(2, 1, 0.7)),
                     {Tensor::constant(Matrix::Zero(3, 1)), Tensor::constant(Matrix::Zero(3, 1))}, w);
  EXPECT_EQ(s.h.value(), Matrix::Zero(3, 1));
  EXPECT_EQ(s.c.value(), Matrix::Zero(3, 1));
}

TEST(LstmCell, MatchesHandCodedStep) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto w = random_weights(3, 2, rng, 0.5);
    const Matrix x = random_matrix(3, 1, rng);
    const Matrix h = random_matrix(2, 1, rng);
    const Matrix c = random_matrix(2, 1, rng);
    Tape tape;
    auto s = lstm_cell(tape, Tensor::constant(x), {Tensor::constant(h), Tensor::constant(c)}, w);
    auto [h_ref, c_ref] = oracle_step(x, h, c, w);
    EXPECT_LT((s.h.value() - h_ref).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((s.c.value() - c_ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(LstmCell, ShapeMismatchIsDimensionError) {
  std::mt19937_64 rng(1);
  auto w = random_weights(3, 2, rng, 0.1);
  Tape tape;
  EXPECT_THROW(lstm_cell(tape, Tensor::zeros(4, 1), {Tensor::zeros(2, 1), Tensor::zeros(2, 1)}, w), DimensionError);
  EXPECT_THROW(lstm_cell(tape, Tensor::zeros(3, 1), {Tensor::zeros(3, 1), Tensor::zeros(3, 1)}, w), DimensionError);
}

TEST(LstmSequence, FiveStepBackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 100);
    auto w = random_weights(3, 2, rng, 0.8);
    auto x = Tensor::parameter(random_matrix(3, 5, rng));
    const Matrix readout = random_matrix(2, 5, rng);
    for (bool reverse : {false, true}) {
      auto loss_on = [&](Tape& t) {
        return sum(t, elementwise_mul(t, lstm_sequence(t, x, w, reverse), Tensor::constant(readout)));
      };
      std::vector<Tensor> params = {w.input_weights, w.recurrent_weights, w.bias, x};
      for (auto& p : params) p.zero_grad();
      Tape tape;
      tape.backward(loss_on(tape));
      for (auto& p : params) {
        const Matrix analytic = p.grad();
        auto f = [&] {
          Tape t;
          return loss_on(t).item();
        };
        EXPECT_LT(max_relative_error(analytic, numeric_gradient(f, p)), 1e-5) << "seed " << seed;
      }
    }
  }
}

TEST(BiLstm, SingleStepShape) {
  std::mt19937_64 rng(3);
  auto w = BiLstmWeights::init(3, 6, 0.05, rng);
  Tape tape;
  auto out = bilstm_encode(tape, Tensor::constant(random_matrix(3, 1, rng)), w);
  EXPECT_EQ(out.rows(), 6);
  EXPECT_EQ(out.cols(), 1);
}

TEST(BiLstm, EmptySequenceAndOddWidthAreRejected) {
  std::mt19937_64 rng(3);
  auto w = BiLstmWeights::init(3, 4, 0.05, rng);
  Tape tape;
  EXPECT_THROW(bilstm_encode(tape, Tensor::zeros(3, 0), w), EmptySequenceError);
  EXPECT_THROW(BiLstmWeights::init(3, 5, 0.05, rng), ConfigError);
}

TEST(BiLstm, InitUsesForgetBiasOne) {
  std::mt19937_64 rng(4);
  auto w = BiLstmWeights::init(3, 4, 0.05, rng);
  for (const auto* dir : {&w.forward, &w.backward}) {
    const Matrix& b = dir->bias.value();
    EXPECT_EQ(b.rows(), 8);
    for (std::ptrdiff_t r = 0; r < 8; ++r) EXPECT_EQ(b(r, 0), (r >= 2 && r < 4) ? 1.0 : 0.0);
    EXPECT_LE(dir->input_weights.value().cwiseAbs().maxCoeff(), 0.05);
  }
}

TEST(BiLstm, ReversingInputSwapsHalvesAtMirroredPositions) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto w = BiLstmWeights::init(3, 4, 0.5, rng);
    const Matrix x = random_matrix(3, 6, rng);
    const Matrix x_rev = x.rowwise().reverse();
    BiLstmWeights swapped{w.backward, w.forward};
    Tape tape;
    const Matrix a = bilstm_encode(tape, Tensor::constant(x), w).value();
    const Matrix b = bilstm_encode(tape, Tensor::constant(x_rev), swapped).value();
    for (std::ptrdiff_t t = 0; t < 6; ++t) {
      EXPECT_LT((a.block(0, t, 2, 1) - b.block(2, 5 - t, 2, 1)).cwiseAbs().maxCoeff(), 1e-14);
      EXPECT_LT((a.block(2, t, 2, 1) - b.block(0, 5 - t, 2, 1)).cwiseAbs().maxCoeff(), 1e-14);
    }
  }
}

TEST(BiLstm, UnrolledGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 7);
    auto w = BiLstmWeights::init(3, 4, 0.8, rng);
    auto x = Tensor::parameter(random_matrix(3, 4, rng));
    const Matrix readout = random_matrix(4, 4, rng);
    auto loss_on = [&](Tape& t) {
      return sum(t, elementwise_mul(t, bilstm_encode(t, x, w), Tensor::constant(readout)));
    };
    std::vector<Tensor> params = {w.forward.input_weights,  w.forward.recurrent_weights,  w.forward.bias,
                                  w.backward.input_weights, w.backward.recurrent_weights, w.backward.bias,
                                  x};
    Tape tape;
    tape.backward(loss_on(tape));
    for (auto& p : params) {
      const Matrix analytic = p.grad();
      auto f = [&] {
        Tape t;
        return loss_on(t).item();
      };
      EXPECT_LT(max_relative_error(analytic, numeric_gradient(f, p)), 1e-5) << "seed " << seed;
    }
  }
}

}  // namespace
}  // namespace comatch::tensor
