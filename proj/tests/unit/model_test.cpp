#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "comatch/diagnostics.hpp"
#include "comatch/errors.hpp"
#include "comatch/model.hpp"
#include "comatch/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace comatch::model {
namespace {

using tensor::Matrix;
using testing::column;
using testing::mat;
using testing::attention_only;
using testing::naive_attention;
using testing::random_matrix;

constexpr int kVocab = 20;

ModelParams small_params(std::uint64_t seed, Variant variant = Variant::full, std::ptrdiff_t d = 4,
                         std::ptrdiff_t l = 4) {
  auto p = ModelParams::init({d, l, variant}, seed);
  // Spread the weights out so different inputs give visibly different scores.
  std::mt19937_64 rng(seed ^ 0x5eed);
  for (auto& t : p.tensors()) t.mutable_value() = random_matrix(t.rows(), t.cols(), rng, -0.8, 0.8);
  return p;
}

// ---- parameters ---------------------------------------------------------------

TEST(InitParams, SameSeedIsBitIdentical) {
  auto a = ModelParams::init({5, 6, Variant::full}, 42);
  auto b = ModelParams::init({5, 6, Variant::full}, 42);
  auto c = ModelParams::init({5, 6, Variant::full}, 43);
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  const auto tc = c.tensors();
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].value(), tb[i].value()) << a.names()[i];
    any_diff = any_diff || ta[i].value() != tc[i].value();
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitParams, RangesGradsAndFlags) {
  auto p = ModelParams::init({4, 4, Variant::full}, 1);
  const auto names = p.names();
  const auto tensors = p.tensors();
  ASSERT_EQ(names.size(), tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    EXPECT_TRUE(tensors[i].requires_grad()) << names[i];
    EXPECT_EQ(tensors[i].grad(), Matrix::Zero(tensors[i].rows(), tensors[i].cols())) << names[i];
    EXPECT_LE(tensors[i].value().cwiseAbs().maxCoeff(), 1.0) << names[i];
    if (names[i].ends_with("weight") || names[i].ends_with("weights")) {
      EXPECT_LE(tensors[i].value().cwiseAbs().maxCoeff(), 0.05) << names[i];
    }
  }
  EXPECT_EQ(p.attention_bias.value(), Matrix::Zero(4, 1));
  EXPECT_EQ(p.match_bias.value(), Matrix::Zero(4, 1));
}

TEST(InitParams, OddHiddenSizeIsAConfigError) {
  EXPECT_THROW(ModelParams::init({4, 5, Variant::full}, 1), ConfigError);
  EXPECT_THROW(ModelParams::init({0, 4, Variant::full}, 1), ConfigError);
}

TEST(InitParams, ShapesFollowTheFieldList) {
  auto p = ModelParams::init({3, 6, Variant::full}, 1);
  EXPECT_EQ(p.encoder.forward.input_weights.cols(), 3);
  EXPECT_EQ(p.encoder.output_size(), 6);
  EXPECT_EQ(p.attention_weight.rows(), 6);
  EXPECT_EQ(p.attention_weight.cols(), 6);
  EXPECT_EQ(p.match_weight.rows(), 6);
  EXPECT_EQ(p.match_weight.cols(), 12);
  EXPECT_EQ(p.lower.forward.input_weights.cols(), 12);
  EXPECT_EQ(p.lower.output_size(), 6);
  EXPECT_EQ(p.upper.forward.input_weights.cols(), 6);
  EXPECT_EQ(p.score_weight.rows(), 6);
  EXPECT_EQ(p.score_weight.cols(), 1);
}

TEST(ParameterCount, HandCountForD4L4) {
  // Per direction h = 2: 4h*in + 4h*h + 4h.
  //   encoder   in 4: 2 * (32 + 16 + 8)  = 112
  //   W_g, b_g:       16 + 4             =  20
  //   W_m, b_m:       32 + 4             =  36
  //   sentence  in 8: 2 * (64 + 16 + 8)  = 176
  //   document  in 4: 2 * (32 + 16 + 8)  = 112
  //   w:                                     4
  const ModelDims dims{4, 4, Variant::full};
  EXPECT_EQ(ModelParams::init(dims, 0).parameter_count(), 460u);
  EXPECT_EQ(expected_parameter_count(dims), 460u);
}

TEST(ParameterCount, FlatEqualsHierarchicalAndSingleMatchIsSmaller) {
  for (std::ptrdiff_t d : {2, 3, 8}) {
    for (std::ptrdiff_t l : {2, 4, 6, 16}) {
      const auto full = ModelParams::init({d, l, Variant::full}, 0).parameter_count();
      const auto flat = ModelParams::init({d, l, Variant::flat}, 0).parameter_count();
      const auto single = ModelParams::init({d, l, Variant::single_match}, 0).parameter_count();
      EXPECT_EQ(full, flat);
      EXPECT_LT(single, full);
      EXPECT_EQ(single, expected_parameter_count({d, l, Variant::single_match}));
    }
  }
}

TEST(ParamsCopies, CloneConstantsAndCopyValues) {
  auto p = small_params(3);
  auto c = p.clone();
  auto k = p.constants();
  for (std::size_t i = 0; i < p.tensors().size(); ++i) {
    EXPECT_FALSE(c.tensors()[i].same_storage(p.tensors()[i]));
    EXPECT_EQ(c.tensors()[i].value(), p.tensors()[i].value());
    EXPECT_TRUE(c.tensors()[i].requires_grad());
    EXPECT_FALSE(k.tensors()[i].requires_grad());
  }
  auto q = ModelParams::init(p.dims, 99);
  q.copy_values_from(p);
  for (std::size_t i = 0; i < p.tensors().size(); ++i) EXPECT_EQ(q.tensors()[i].value(), p.tensors()[i].value());
}

// ---- encode_sequence ------------------------------------------------------------

TEST(EncodeSequence, ShapeIsLByT) {
  auto p = small_params(1, Variant::full, 3, 6);
  std::mt19937_64 rng(1);
  for (std::ptrdiff_t t = 1; t <= 5; ++t) {
    Tape tape;
    auto h = encode_sequence(tape, p, Tensor::constant(random_matrix(3, t, rng)));
    EXPECT_EQ(h.rows(), 6);
    EXPECT_EQ(h.cols(), t);
  }
}

TEST(EncodeSequence, QuestionEncodingIsReusedBitwise) {
  // The question states inside the full forward equal a standalone encoding:
  // the attention dump (built from the same blocks) reproduces G_q exactly.
  auto p = small_params(2);
  std::mt19937_64 rng(2);
  auto emb = testing::random_embeddings(4, kVocab, rng);
  auto ex = testing::tiny_example(rng, kVocab, 3);
  const auto masked = data::to_masked(ex);
  Tape tape;
  const auto dump = inspect_attention(tape, p, emb, masked, 1);
  const Tensor q = encode_sequence(tape, p, embed(tape, emb, masked.question));
  for (std::size_t n = 0; n < dump.size(); ++n) {
    const Tensor passage = encode_sequence(tape, p, embed(tape, emb, masked.sentences[n]));
    const auto aq = attention_match(tape, p, passage, q);
    EXPECT_EQ(aq.weights.value(), dump[n].question.weights.value());
  }
}

TEST(EncodeSequence, EmbeddingsGetGradientsOnlyWhenTrainable) {
  auto p = small_params(5);
  std::mt19937_64 rng(5);
  auto ex = testing::tiny_example(rng, kVocab);
  const auto masked = data::to_masked(ex);
  auto frozen = testing::random_embeddings(4, kVocab, rng, false);
  auto trainable = Tensor::parameter(frozen.value());
  {
    Tape tape;
    tape.backward(candidate_loss(tape, score_candidates(tape, p, frozen, masked), 0));
    EXPECT_FALSE(frozen.requires_grad());
  }
  {
    Tape tape;
    tape.backward(candidate_loss(tape, score_candidates(tape, p, trainable, masked), 0));
    EXPECT_GT(trainable.grad().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(trainable.grad().col(0), Matrix::Zero(4, 1));  // PAD never looked up
  }
}

// ---- attention_match --------------------------------------------------------------

TEST(AttentionMatch, WorkedExample) {
  auto p = attention_only(1, mat({{1}}), mat({{0}}));
  Tape tape;
  auto r = attention_match(tape, p, Tensor::constant(mat({{0, 1}})), Tensor::constant(mat({{1, 2}})));
  const double e = std::exp(1.0);
  const double g0 = 1.0 / (1.0 + e);
  ASSERT_EQ(r.weights.rows(), 2);
  ASSERT_EQ(r.weights.cols(), 2);
  EXPECT_NEAR(r.weights.value()(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(r.weights.value()(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(r.weights.value()(0, 1), g0, 1e-15);
  EXPECT_NEAR(r.weights.value()(1, 1), 1.0 - g0, 1e-15);
  EXPECT_NEAR(r.aligned.value()(0, 0), 1.5, 1e-15);
  EXPECT_NEAR(r.aligned.value()(0, 1), g0 + 2.0 * (1.0 - g0), 1e-15);
  EXPECT_NEAR(r.aligned.value()(0, 1), 1.73106, 1e-5);
}

TEST(AttentionMatch, ZeroParametersGiveUniformMean) {
  std::mt19937_64 rng(8);
  auto p = attention_only(3, Matrix::Zero(3, 3), Matrix::Zero(3, 1));
  const Matrix other = random_matrix(3, 4, rng);
  const tensor::Mask mask = {1, 0, 1, 1};
  Tape tape;
  auto r = attention_match(tape, p, Tensor::constant(random_matrix(3, 5, rng)), Tensor::constant(other), mask);
  const Matrix mean = (other.col(0) + other.col(2) + other.col(3)) / 3.0;
  for (std::ptrdiff_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(r.weights.value()(0, j), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(r.weights.value()(1, j), 0.0);
    EXPECT_LT((r.aligned.value().col(j) - mean).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(AttentionMatch, FullyMaskedOtherIsDegenerate) {
  auto p = attention_only(2, Matrix::Identity(2, 2), Matrix::Zero(2, 1));
  Tape tape;
  EXPECT_THROW(attention_match(tape, p, Tensor::zeros(2, 3), Tensor::zeros(2, 2), {0, 0}), DegenerateMaskError);
}

TEST(AttentionMatch, AgreesWithNaiveOracleOn200Instances) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    const std::ptrdiff_t l = 1 + static_cast<std::ptrdiff_t>(rng() % 4);
    const std::ptrdiff_t P = 1 + static_cast<std::ptrdiff_t>(rng() % 6);
    const std::ptrdiff_t S = 1 + static_cast<std::ptrdiff_t>(rng() % 6);
    const Matrix w = random_matrix(l, l, rng, -2, 2), b = random_matrix(l, 1, rng, -2, 2);
    const Matrix hp = random_matrix(l, P, rng, -2, 2), ho = random_matrix(l, S, rng, -2, 2);
    tensor::Mask mask;
    if (seed % 2 == 1) {
      mask.resize(static_cast<std::size_t>(S));
      for (auto& m : mask) m = static_cast<std::uint8_t>(rng() % 2);
      mask[rng() % static_cast<std::size_t>(S)] = 1;
    }
    auto p = attention_only(l, w, b);
    Tape tape;
    auto r = attention_match(tape, p, Tensor::constant(hp), Tensor::constant(ho), mask);
    auto [g_ref, h_ref] = naive_attention(w, b, hp, ho, mask);
    EXPECT_LT((r.weights.value() - g_ref).cwiseAbs().maxCoeff(), 1e-10) << "seed " << seed;
    EXPECT_LT((r.aligned.value() - h_ref).cwiseAbs().maxCoeff(), 1e-10) << "seed " << seed;
    for (std::ptrdiff_t j = 0; j < P; ++j) EXPECT_NEAR(r.weights.value().col(j).sum(), 1.0, 1e-12);
  }
}

// ---- co_match -----------------------------------------------------------------------

TEST(CoMatch, SelfMatchKeepsOnlyTheProductBranch) {
  std::mt19937_64 rng(4);
  auto p = small_params(4);
  const Matrix hp = random_matrix(4, 5, rng);
  Tape tape;
  auto r = co_match(tape, p, Tensor::constant(hp), Tensor::constant(hp), Tensor::constant(hp));
  Matrix features(8, 5);
  features << Matrix::Zero(4, 5), hp.cwiseProduct(hp);
  Matrix expected = p.match_weight.value() * features;
  expected.colwise() += p.match_bias.value().col(0);
  expected = expected.cwiseMax(0.0);
  EXPECT_LT((r.match_q.value() - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(r.match_q.value(), r.match_a.value());
}

TEST(CoMatch, ZeroWeightsGiveZeroStates) {
  std::mt19937_64 rng(4);
  auto p = small_params(4);
  p.match_weight.mutable_value().setZero();
  p.match_bias.mutable_value().setZero();
  Tape tape;
  auto r = co_match(tape, p, Tensor::constant(random_matrix(4, 3, rng)), Tensor::constant(random_matrix(4, 3, rng)),
                    Tensor::constant(random_matrix(4, 3, rng)));
  EXPECT_EQ(r.states.value(), Matrix::Zero(8, 3));
}

TEST(CoMatch, StateShapeIsTwoLByP) {
  auto p = small_params(4, Variant::full, 4, 6);
  Tape tape;
  auto r = co_match(tape, p, Tensor::zeros(6, 9), Tensor::zeros(6, 9), Tensor::zeros(6, 9));
  EXPECT_EQ(r.states.rows(), 12);
  EXPECT_EQ(r.states.cols(), 9);
  EXPECT_EQ(r.states.rows(), r.match_q.rows() + r.match_a.rows());
}

// ---- aggregation ----------------------------------------------------------------------

TEST(SentenceAggregate, SingleColumnPoolsToTheBiLstmOutput) {
  std::mt19937_64 rng(6);
  auto p = small_params(6);
  const Matrix c = random_matrix(8, 1, rng);
  Tape tape;
  auto h = sentence_aggregate(tape, p, Tensor::constant(c));
  auto direct = tensor::bilstm_encode(tape, Tensor::constant(c), p.lower);
  EXPECT_EQ(h.value(), direct.value());
  EXPECT_EQ(h.rows(), 4);
  EXPECT_EQ(h.cols(), 1);
}

TEST(SentenceAggregate, MaskedPaddingColumnsChangeNothing) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto p = small_params(seed);
    const std::ptrdiff_t P = 1 + static_cast<std::ptrdiff_t>(rng() % 5);
    const Matrix c = random_matrix(8, P, rng);
    Matrix padded(8, P + 2);
    padded << c, random_matrix(8, 2, rng);
    tensor::Mask mask(static_cast<std::size_t>(P + 2), 1);
    mask[static_cast<std::size_t>(P)] = mask[static_cast<std::size_t>(P + 1)] = 0;
    Tape tape;
    EXPECT_EQ(sentence_aggregate(tape, p, Tensor::constant(c)).value(),
              sentence_aggregate(tape, p, Tensor::constant(padded), mask).value());
  }
}

TEST(DocumentAggregate, ShapesAndErrors) {
  std::mt19937_64 rng(7);
  auto p = small_params(7);
  Tape tape;
  std::vector<Tensor> one = {Tensor::constant(random_matrix(4, 1, rng))};
  auto h = document_aggregate(tape, p, one);
  EXPECT_EQ(h.value(), tensor::bilstm_encode(tape, one[0], p.upper).value());
  EXPECT_EQ(h.rows(), 4);
  EXPECT_THROW(document_aggregate(tape, p, std::vector<Tensor>{}), EmptySequenceError);
}

TEST(DocumentAggregate, SentenceOrderMatters) {
  int changed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto p = small_params(seed);
    std::vector<Tensor> s = {Tensor::constant(random_matrix(4, 1, rng)), Tensor::constant(random_matrix(4, 1, rng))};
    std::vector<Tensor> swapped = {s[1], s[0]};
    Tape tape;
    if (document_aggregate(tape, p, s).value() != document_aggregate(tape, p, swapped).value()) ++changed;
  }
  EXPECT_GT(changed, 0);
}

// ---- scoring ---------------------------------------------------------------------------

class AllVariants : public ::testing::TestWithParam<Variant> {};

TEST_P(AllVariants, ScoresHaveOneEntryPerCandidate) {
  std::mt19937_64 rng(1);
  auto p = small_params(1, GetParam());
  auto emb = testing::random_embeddings(4, kVocab, rng);
  for (std::size_t k : {2u, 3u, 4u}) {
    auto ex = testing::tiny_example(rng, kVocab, k);
    Tape tape;
    auto s = score_candidates(tape, p, emb, data::to_masked(ex));
    EXPECT_EQ(s.rows(), static_cast<std::ptrdiff_t>(k));
    EXPECT_EQ(s.cols(), 1);
    EXPECT_TRUE(s.value().allFinite());
  }
}

TEST_P(AllVariants, IdenticalOptionsScoreIdentically) {
  std::mt19937_64 rng(2);
  auto p = small_params(2, GetParam());
  auto emb = testing::random_embeddings(4, kVocab, rng);
  auto ex = testing::tiny_example(rng, kVocab, 4);
  ex.options[3] = ex.options[1];
  Tape tape;
  auto s = score_candidates(tape, p, emb, data::to_masked(ex));
  EXPECT_EQ(s.value()(1, 0), s.value()(3, 0));
}

TEST_P(AllVariants, PermutingOptionsPermutesScoresExactly) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto p = small_params(seed, GetParam());
    auto emb = testing::random_embeddings(4, kVocab, rng);
    auto ex = testing::tiny_example(rng, kVocab, 4);
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permuted = ex;
    for (std::size_t i = 0; i < 4; ++i) permuted.options[i] = ex.options[perm[i]];
    Tape tape;
    const Matrix s = score_candidates(tape, p, emb, data::to_masked(ex)).value();
    const Matrix sp = score_candidates(tape, p, emb, data::to_masked(permuted)).value();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(sp(static_cast<std::ptrdiff_t>(i), 0), s(static_cast<std::ptrdiff_t>(perm[i]), 0));
    const std::size_t best = predict(std::span<const double>(s.data(), 4));
    const std::size_t best_p = predict(std::span<const double>(sp.data(), 4));
    EXPECT_EQ(s(static_cast<std::ptrdiff_t>(best), 0), sp(static_cast<std::ptrdiff_t>(best_p), 0));
    if (std::count(s.data(), s.data() + 4, s(static_cast<std::ptrdiff_t>(best), 0)) == 1) EXPECT_EQ(perm[best_p], best);
  }
}

data::MaskedSequence pad(const std::vector<int>& ids, std::size_t extra) {
  data::MaskedSequence seq{ids, tensor::Mask(ids.size(), 1)};
  for (std::size_t i = 0; i < extra; ++i) {
    seq.ids.push_back(data::Vocabulary::kPad);
    seq.mask.push_back(0);
  }
  return seq;
}

TEST_P(AllVariants, PaddingLeavesScoresBitUnchanged) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto p = small_params(seed, GetParam());
    auto emb = testing::random_embeddings(4, kVocab, rng);
    auto ex = testing::tiny_example(rng, kVocab, 3);
    const auto plain = data::to_masked(ex);
    data::MaskedExample padded;
    for (const auto& s : ex.sentences) padded.sentences.push_back(pad(s, rng() % 3));
    padded.sentence_count = ex.sentences.size();
    padded.sentences.push_back(pad({}, 4));  // a whole padding sentence
    padded.question = pad(ex.question, 1 + rng() % 3);
    for (const auto& o : ex.options) padded.options.push_back(pad(o, rng() % 3));
    Tape tape;
    EXPECT_EQ(score_candidates(tape, p, emb, plain).value(), score_candidates(tape, p, emb, padded).value())
        << "seed " << seed;
  }
}

TEST_P(AllVariants, ScoresReactToOptionText) {
  int changed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto p = small_params(seed, GetParam());
    auto emb = testing::random_embeddings(4, kVocab, rng);
    auto ex = testing::tiny_example(rng, kVocab, 2);
    Tape tape;
    const Matrix before = score_candidates(tape, p, emb, data::to_masked(ex)).value();
    ex.options[0][0] = 2 + (ex.options[0][0] - 2 + 1) % (kVocab - 2);
    const Matrix after = score_candidates(tape, p, emb, data::to_masked(ex)).value();
    if (before(0, 0) != after(0, 0)) ++changed;
    EXPECT_EQ(before(1, 0), after(1, 0));
  }
  // Tiny ReLU/max-pool stacks can mask a one-token edit now and then.
  EXPECT_GE(changed, 15);
}

TEST_P(AllVariants, FixedSeedIsDeterministic) {
  auto run = [](Variant v) {
    std::mt19937_64 rng(9);
    auto p = ModelParams::init({4, 4, v}, 9);
    auto emb = testing::random_embeddings(4, kVocab, rng);
    auto ex = testing::tiny_example(rng, kVocab, 4);
    Tape tape;
    return Matrix(score_candidates(tape, p, emb, data::to_masked(ex)).value());
  };
  EXPECT_EQ(run(GetParam()), run(GetParam()));
}

TEST_P(AllVariants, EndToEndGradientsMatchFiniteDifferences) {
  // Noise-aware form of the end-to-end check: every entry must agree within
  // an absolute 1e-9, and entries clear of roundoff (|g| > 1e-6) within a
  // relative 1e-4. The strict form (relative 1e-4 on every entry) is reported
  // by the acceptance binary.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto inst = tiny_grad_check_instance(seed, GetParam());
    const auto masked = data::to_masked(inst.example);
    auto params = inst.params.tensors();
    params.push_back(inst.embeddings);
    auto loss_on = [&](Tape& t) {
      return candidate_loss(t, score_candidates(t, inst.params, inst.embeddings, masked),
                            static_cast<std::size_t>(inst.example.gold));
    };
    for (auto& p : params) p.zero_grad();
    Tape tape;
    tape.backward(loss_on(tape));
    for (auto& p : params) {
      const Matrix analytic = p.grad();
      auto f = [&] {
        Tape t;
        return loss_on(t).item();
      };
      const Matrix numeric = testing::numeric_gradient(f, p);
      for (std::ptrdiff_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic.data()[i], n = numeric.data()[i];
        EXPECT_LT(std::abs(a - n), 1e-9);
        if (std::abs(a) > 1e-6) EXPECT_LT(std::abs(a - n) / std::abs(a), 1e-4);
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, AllVariants,
                         ::testing::Values(Variant::full, Variant::single_match, Variant::flat),
                         [](const auto& info) {
                           std::string name(variant_name(info.param));
                           std::replace(name.begin(), name.end(), '-', '_');
                           return name;
                         });

TEST(SingleMatch, EmptyAnswerDegeneratesToQuestionAlone) {
  std::mt19937_64 rng(3);
  auto p = small_params(3, Variant::single_match);
  auto emb = testing::random_embeddings(4, kVocab, rng);
  auto ex = testing::tiny_example(rng, kVocab, 2);
  auto masked = data::to_masked(ex);
  masked.options[0] = pad({}, 2);  // no real tokens
  Tape tape;
  const Matrix s = score_candidates(tape, p, emb, masked).value();
  const Tensor q = encode_sequence(tape, p, embed(tape, emb, masked.question));
  std::vector<Tensor> sentence_vectors;
  for (std::size_t n = 0; n < masked.sentence_count; ++n) {
    const Tensor passage = encode_sequence(tape, p, embed(tape, emb, masked.sentences[n]));
    const auto att = attention_match(tape, p, passage, q);
    sentence_vectors.push_back(sentence_aggregate(tape, p, match_branch(tape, p, passage, att.aligned)));
  }
  const Tensor h = document_aggregate(tape, p, sentence_vectors);
  EXPECT_EQ(s(0, 0), (p.score_weight.value().transpose() * h.value())(0, 0));
}

TEST(Flat, SingleSentenceLayersHaveMatchingInputShapes) {
  auto full = ModelParams::init({4, 6, Variant::full}, 1);
  auto flat = ModelParams::init({4, 6, Variant::flat}, 1);
  EXPECT_EQ(full.lower.forward.input_weights.cols(), flat.lower.forward.input_weights.cols());
  EXPECT_EQ(full.upper.forward.input_weights.cols(), flat.upper.forward.input_weights.cols());
  EXPECT_EQ(flat.names()[10].rfind("flat_lstm1", 0), 0u);
}

TEST(Variants, NamesRoundTrip) {
  for (auto v : {Variant::full, Variant::single_match, Variant::flat}) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("hierarchical"), ConfigError);
}

// ---- loss and prediction -------------------------------------------------------------

TEST(CandidateLoss, UniformScoresGiveLnK) {
  Tape tape;
  auto loss = candidate_loss(tape, Tensor::constant(Matrix::Constant(4, 1, -1.25)), 3);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(loss.item(), 1.386294, 1e-6);
}

TEST(CandidateLoss, SaturatesAtLargeGap) {
  Tape tape;
  auto loss = candidate_loss(tape, Tensor::constant(column({50, 0, 0, 0})), 0);
  EXPECT_LT(loss.item(), 1e-20);
  EXPECT_GE(loss.item(), 0.0);
}

TEST(CandidateLoss, GradientIsSoftmaxMinusOneHot) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t k = 2 + rng() % 4;
    const std::size_t gold = rng() % k;
    auto s = Tensor::parameter(random_matrix(static_cast<std::ptrdiff_t>(k), 1, rng, -3, 3));
    Tape tape;
    auto loss = candidate_loss(tape, s, gold);
    EXPECT_GE(loss.item(), 0.0);
    tape.backward(loss);
    Matrix expected = (s.value().array() - s.value().maxCoeff()).exp().matrix();
    expected /= expected.sum();
    expected(static_cast<std::ptrdiff_t>(gold), 0) -= 1.0;
    EXPECT_LT((s.grad() - expected).cwiseAbs().maxCoeff(), 1e-10);
    auto f = [&] {
      Tape t;
      return candidate_loss(t, s, gold).item();
    };
    EXPECT_LT((s.grad() - testing::numeric_gradient(f, s)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Predict, Examples) {
  const std::vector<double> tie = {0.1, 0.9, 0.9, 0.2};
  EXPECT_EQ(predict(tie), 1u);
  const std::vector<double> one = {-3.0};
  EXPECT_EQ(predict(one), 0u);
  const std::vector<double> inc = {-1, 0, 1, 2, 3};
  EXPECT_EQ(predict(inc), 4u);
  EXPECT_THROW(predict(std::vector<double>{}), ContractError);
}

// ---- question types ---------------------------------------------------------------------

std::vector<std::string> tags(std::string_view question) {
  auto tokens = data::tokenize(question);
  return bucket_by_question_type(tokens);
}

TEST(QuestionType, Examples) {
  EXPECT_EQ(tags("Which statement of the following is true?"), (std::vector<std::string>{"true"}));
  EXPECT_EQ(tags("How did the author get the island?"), (std::vector<std::string>{"how"}));
  EXPECT_EQ(tags("which of the following is not true"), (std::vector<std::string>{"true", "not"}));
  EXPECT_EQ(tags("The best title for the passage is _ ."), (std::vector<std::string>{"title"}));
  EXPECT_EQ(tags("Tom went to _ ."), (std::vector<std::string>{"other"}));
  EXPECT_EQ(tags("Why and when did it happen?"), (std::vector<std::string>{"why", "when"}));
}

// ---- synthetic data runs end to end ----------------------------------------------------------

TEST_P(AllVariants, RunsOnSyntheticSet) {
  data::SyntheticSpec spec;
  spec.examples = 4;
  const auto examples = data::synthetic_copy_task(spec, 3);
  auto p = ModelParams::init({8, 8, GetParam()}, 3);
  std::mt19937_64 rng(3);
  auto emb = testing::random_embeddings(8, spec.vocab_size + 2, rng);
  for (const auto& ex : examples) {
    Tape tape;
    auto s = score_candidates(tape, p, emb, data::to_masked(ex));
    auto loss = candidate_loss(tape, s, static_cast<std::size_t>(ex.gold));
    tape.backward(loss);
    EXPECT_TRUE(std::isfinite(loss.item()));
  }
}

}  // namespace
}  // namespace comatch::model
