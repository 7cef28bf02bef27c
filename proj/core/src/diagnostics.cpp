#include "comatch/diagnostics.hpp"

#include <random>

#include "comatch/random.hpp"

namespace comatch::model {

namespace {

constexpr int kTinyVocab = 12;
// Wider than the training init so candidate scores actually differ; with the
// init scale most gradient entries sit below central-difference roundoff.
constexpr double kWeightRange = 1.0;
constexpr double kEmbeddingRange = 2.0;
constexpr double kScoreRange = 3.0;

}  // namespace

GradCheckInstance tiny_grad_check_instance(std::uint64_t seed, Variant variant) {
  GradCheckInstance inst;
  inst.params = ModelParams::init({3, 4, variant}, seed);
  auto rng = substream(seed, "gradcheck");
  auto fill = [&rng](tensor::Matrix& m, double range) {
    std::uniform_real_distribution<double> dist(-range, range);
    for (std::ptrdiff_t i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  for (auto& t : inst.params.tensors()) fill(t.mutable_value(), kWeightRange);
  fill(inst.params.score_weight.mutable_value(), kScoreRange);
  tensor::Matrix table(3, kTinyVocab);
  fill(table, kEmbeddingRange);
  table.col(data::Vocabulary::kPad).setZero();
  inst.embeddings = Tensor::parameter(std::move(table));

  std::uniform_int_distribution<int> token(2, kTinyVocab - 1);
  auto sequence = [&](std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::vector<int> ids(len(rng));
    for (int& id : ids) id = token(rng);
    return ids;
  };
  auto& ex = inst.example;
  ex.id = "gradcheck#" + std::to_string(seed);
  ex.sentences = {sequence(4), sequence(4)};
  ex.question = {token(rng), token(rng), token(rng)};
  ex.options = {sequence(3), sequence(3)};
  ex.question_tokens = {"what", "is", "it"};
  ex.gold = std::uniform_int_distribution<int>(0, 1)(rng);
  return inst;
}

std::vector<tensor::GradCheckEntry> end_to_end_grad_check(std::uint64_t seed, double eps, Variant variant) {
  auto inst = tiny_grad_check_instance(seed, variant);
  const auto masked = data::to_masked(inst.example);
  auto params = inst.params.tensors();
  auto names = inst.params.names();
  params.push_back(inst.embeddings);
  names.emplace_back("embedding");
  const auto gold = static_cast<std::size_t>(inst.example.gold);
  auto loss = [&](tensor::Tape& tape) {
    return candidate_loss(tape, score_candidates(tape, inst.params, inst.embeddings, masked), gold);
  };
  return tensor::grad_check_groups(loss, params, names, eps);
}

}  // namespace comatch::model
