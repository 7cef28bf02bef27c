#include <benchmark/benchmark.h>

#include <random>

#include "comatch/lstm.hpp"
#include "comatch/model.hpp"
#include "comatch/tensor.hpp"

namespace {

using namespace comatch;
using tensor::Matrix;
using tensor::Tape;
using tensor::Tensor;

Matrix random_matrix(std::ptrdiff_t r, std::ptrdiff_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix m(r, c);
  for (std::ptrdiff_t i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = state.range(0);
  std::mt19937_64 rng(1);
  const auto a = Tensor::parameter(random_matrix(n, n, rng));
  const auto b = Tensor::parameter(random_matrix(n, n, rng));
  for (auto _ : state) {
    Tape tape;
    auto y = tensor::sum(tape, tensor::matmul(tape, a, b));
    tape.backward(y);
    benchmark::DoNotOptimize(y.item());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

// Forward + backward through a Bi-LSTM at the default widths.
void BM_BiLstm(benchmark::State& state) {
  const auto steps = state.range(0);
  std::mt19937_64 rng(2);
  const auto weights = tensor::BiLstmWeights::init(100, 150, 0.05, rng);
  const auto x = Tensor::constant(random_matrix(100, steps, rng));
  for (auto _ : state) {
    Tape tape;
    auto y = tensor::sum(tape, tensor::bilstm_encode(tape, x, weights));
    tape.backward(y);
    benchmark::DoNotOptimize(y.item());
  }
  state.SetItemsProcessed(state.iterations() * steps);
}
BENCHMARK(BM_BiLstm)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);

// One RACE-sized example (12 sentences of 20 tokens, 4 options) through each variant.
void BM_ScoreCandidates(benchmark::State& state) {
  const auto variant = static_cast<model::Variant>(state.range(0));
  const bool backward = state.range(1) != 0;
  auto params = model::ModelParams::init({100, 128, variant}, 1);
  std::mt19937_64 rng(3);
  const int vocab = 2000;
  const auto emb = Tensor::constant(random_matrix(100, vocab, rng));
  std::uniform_int_distribution<int> token(2, vocab - 1);
  auto seq = [&](std::size_t n) {
    data::MaskedSequence s;
    for (std::size_t i = 0; i < n; ++i) s.ids.push_back(token(rng));
    return s;
  };
  data::MaskedExample ex;
  for (int n = 0; n < 12; ++n) ex.sentences.push_back(seq(20));
  ex.sentence_count = ex.sentences.size();
  ex.question = seq(12);
  for (int k = 0; k < 4; ++k) ex.options.push_back(seq(8));
  for (auto _ : state) {
    Tape tape;
    auto scores = model::score_candidates(tape, params, emb, ex);
    if (backward) {
      auto loss = model::candidate_loss(tape, scores, 0);
      tape.backward(loss);
      params.zero_grad();
    }
    benchmark::DoNotOptimize(scores.value().data());
  }
  state.SetLabel(std::string(model::variant_name(variant)) + (backward ? " fwd+bwd" : " fwd"));
}
BENCHMARK(BM_ScoreCandidates)
    ->ArgsProduct({{0, 1, 2}, {0, 1}})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
