#pragma once

// The co-matching reader: a shared Bi-LSTM encoder, attention that aligns the
// question and each candidate answer to every passage position, co-matching
// states built from those alignments, and a two-level (sentence, document)
// Bi-LSTM + max-pool aggregation scored against a learned vector.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "comatch/data.hpp"
#include "comatch/lstm.hpp"
#include "comatch/tensor.hpp"

namespace comatch::model {

using tensor::Mask;
using tensor::Tape;
using tensor::Tensor;

enum class Variant {
  full,          // co-matching + hierarchical aggregation
  single_match,  // question and answer concatenated, one matching branch
  flat,          // co-matching over the unsplit passage, two stacked Bi-LSTMs
};

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct ModelDims {
  std::ptrdiff_t embedding_dim = 100;  // d
  std::ptrdiff_t hidden = 150;         // l, must be even
  Variant variant = Variant::full;
};

struct ModelParams {
  ModelDims dims;
  tensor::BiLstmWeights encoder;  // d -> l, shared by passage, question and answers
  Tensor attention_weight;        // l x l
  Tensor attention_bias;          // l x 1
  Tensor match_weight;            // l x 2l, shared by both matching branches
  Tensor match_bias;              // l x 1
  tensor::BiLstmWeights lower;    // sentence level (2l or l -> l); first flat layer
  tensor::BiLstmWeights upper;    // document level (l -> l); second flat layer
  Tensor score_weight;            // l x 1

  // Weights uniform in [-0.05, 0.05] from the "init" substream of seed;
  // biases zero except LSTM forget gates at 1.
  static ModelParams init(const ModelDims& dims, std::uint64_t seed);

  // Canonical order, matched by names().
  std::vector<Tensor> tensors() const;
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;

  // Deep copy with fresh (zero) gradients.
  ModelParams clone() const;
  // Deep copy whose tensors never record gradients (for inference).
  ModelParams constants() const;
  // Overwrites every value with the matching one from `source`.
  void copy_values_from(const ModelParams& source);
  void zero_grad();
};

// Closed-form size of ModelParams for the given dimensions.
std::size_t expected_parameter_count(const ModelDims& dims);

struct ForwardOptions {
  double dropout = 0.0;             // on embedded inputs; 0 disables
  std::mt19937_64* rng = nullptr;   // required when dropout > 0
};

struct AttentionResult {
  Tensor weights;  // G: S x P, each column a distribution over the S axis
  Tensor aligned;  // H_other * G: l x P
};

struct CoMatchResult {
  Tensor states;   // C: 2l x P (l x P for the single-match variant)
  Tensor match_q;  // M_q: l x P (undefined for single-match)
  Tensor match_a;  // M_a: l x P
  AttentionResult question;
  AttentionResult answer;
};

// Embeds the real (unmasked) ids of a sequence as a d x T matrix.
Tensor embed(Tape& tape, const Tensor& embeddings, const data::MaskedSequence& seq,
             const ForwardOptions& options = {});

// Bi-LSTM with the shared encoder weights; d x T -> l x T.
Tensor encode_sequence(Tape& tape, const ModelParams& params, const Tensor& x);

// logits = (W_g H_other + b_g)^T H_p, softmax down each passage column over
// the other sequence's unmasked positions. `other_mask` has one entry per
// column of H_other (empty = all real).
AttentionResult attention_match(Tape& tape, const ModelParams& params, const Tensor& passage, const Tensor& other,
                                const Mask& other_mask = {});

// ReLU(W_m [aligned - passage ; aligned * passage] + b_m).
Tensor match_branch(Tape& tape, const ModelParams& params, const Tensor& passage, const Tensor& aligned);

// Both branches with shared W_m, b_m; C = [M_q ; M_a]. Attention fields are
// left empty.
CoMatchResult co_match(Tape& tape, const ModelParams& params, const Tensor& passage, const Tensor& aligned_q,
                       const Tensor& aligned_a);

// Sentence-level Bi-LSTM over the real columns of C, then row max-pool.
Tensor sentence_aggregate(Tape& tape, const ModelParams& params, const Tensor& states, const Mask& column_mask = {});

// Stacks the sentence vectors as columns, document Bi-LSTM, row max-pool.
Tensor document_aggregate(Tape& tape, const ModelParams& params, std::span<const Tensor> sentence_vectors);

// K x 1 scores w^T h_t for each candidate, dispatched on params.dims.variant.
Tensor score_candidates(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                        const data::MaskedExample& example, const ForwardOptions& options = {});

// The individual variants (score_candidates picks one).
Tensor full_forward(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                    const data::MaskedExample& example, const ForwardOptions& options = {});
Tensor single_match_forward(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                            const data::MaskedExample& example, const ForwardOptions& options = {});
Tensor flat_aggregate_forward(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                              const data::MaskedExample& example, const ForwardOptions& options = {});

// Per-sentence attention for one candidate, as used by the forward pass.
// Flat models report one "sentence" covering the whole passage; the
// single-match variant attends over question ++ option and leaves
// CoMatchResult::question empty.
std::vector<CoMatchResult> inspect_attention(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                                             const data::MaskedExample& example, std::size_t option);

// -log softmax(scores)[gold].
Tensor candidate_loss(Tape& tape, const Tensor& scores, std::size_t gold);

// Index of the largest score, lowest index on ties.
std::size_t predict(std::span<const double> scores);
std::size_t predict(const Tensor& scores);

// Keyword tags: why/what/when/where/who/how, true, not, title; "other" when
// none apply. Tags come back in that fixed order.
std::vector<std::string> bucket_by_question_type(std::span<const std::string> question_tokens);

}  // namespace comatch::model
