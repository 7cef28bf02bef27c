#include "comatch/model.hpp"

#include <algorithm>
#include <array>

#include "comatch/errors.hpp"
#include "comatch/random.hpp"

namespace comatch::model {

using tensor::Matrix;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full:
      return "full";
    case Variant::single_match:
      return "single-match";
    case Variant::flat:
      return "flat";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::full;
  if (name == "single-match") return Variant::single_match;
  if (name == "flat") return Variant::flat;
  throw ConfigError("unknown variant \"" + std::string(name) + "\" (expected full, single-match or flat)");
}

// ---- parameters -----------------------------------------------------------

namespace {

constexpr double kInitRange = 0.05;

Matrix uniform(std::ptrdiff_t rows, std::ptrdiff_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-kInitRange, kInitRange);
  Matrix m(rows, cols);
  for (std::ptrdiff_t r = 0; r < rows; ++r)
    for (std::ptrdiff_t c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

std::ptrdiff_t lower_input_width(const ModelDims& dims) {
  return dims.variant == Variant::single_match ? dims.hidden : 2 * dims.hidden;
}

void validate(const ModelDims& dims) {
  if (dims.embedding_dim < 1) throw ConfigError("embedding dimension d must be >= 1");
  if (dims.hidden < 2 || dims.hidden % 2 != 0) {
    throw ConfigError("hidden size l must be even and >= 2, got " + std::to_string(dims.hidden));
  }
}

void append_lstm(std::vector<Tensor>& out, const tensor::LstmWeights& w) {
  out.push_back(w.input_weights);
  out.push_back(w.recurrent_weights);
  out.push_back(w.bias);
}

void append_lstm_names(std::vector<std::string>& out, const std::string& prefix) {
  for (const char* dir : {"fwd", "bwd"}) {
    for (const char* part : {"input_weights", "recurrent_weights", "bias"}) {
      out.push_back(prefix + "." + dir + "." + part);
    }
  }
}

tensor::LstmWeights clone_lstm(const tensor::LstmWeights& w) {
  return {w.input_weights.detached_copy(), w.recurrent_weights.detached_copy(), w.bias.detached_copy()};
}

tensor::BiLstmWeights clone_bilstm(const tensor::BiLstmWeights& w) {
  return {clone_lstm(w.forward), clone_lstm(w.backward)};
}

}  // namespace

ModelParams ModelParams::init(const ModelDims& dims, std::uint64_t seed) {
  validate(dims);
  auto rng = substream(seed, "init");
  const auto l = dims.hidden;
  ModelParams p;
  p.dims = dims;
  p.encoder = tensor::BiLstmWeights::init(dims.embedding_dim, l, kInitRange, rng);
  p.attention_weight = Tensor::parameter(uniform(l, l, rng));
  p.attention_bias = Tensor::parameter(Matrix::Zero(l, 1));
  p.match_weight = Tensor::parameter(uniform(l, 2 * l, rng));
  p.match_bias = Tensor::parameter(Matrix::Zero(l, 1));
  p.lower = tensor::BiLstmWeights::init(lower_input_width(dims), l, kInitRange, rng);
  p.upper = tensor::BiLstmWeights::init(l, l, kInitRange, rng);
  p.score_weight = Tensor::parameter(uniform(l, 1, rng));
  return p;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  append_lstm(out, encoder.forward);
  append_lstm(out, encoder.backward);
  out.push_back(attention_weight);
  out.push_back(attention_bias);
  out.push_back(match_weight);
  out.push_back(match_bias);
  append_lstm(out, lower.forward);
  append_lstm(out, lower.backward);
  append_lstm(out, upper.forward);
  append_lstm(out, upper.backward);
  out.push_back(score_weight);
  return out;
}

std::vector<std::string> ModelParams::names() const {
  const bool flat = dims.variant == Variant::flat;
  std::vector<std::string> out;
  append_lstm_names(out, "encoder");
  out.insert(out.end(), {"attention.weight", "attention.bias", "match.weight", "match.bias"});
  append_lstm_names(out, flat ? "flat_lstm1" : "sentence_lstm");
  append_lstm_names(out, flat ? "flat_lstm2" : "document_lstm");
  out.push_back("score.weight");
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors()) n += static_cast<std::size_t>(t.size());
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  p.dims = dims;
  p.encoder = clone_bilstm(encoder);
  p.attention_weight = attention_weight.detached_copy();
  p.attention_bias = attention_bias.detached_copy();
  p.match_weight = match_weight.detached_copy();
  p.match_bias = match_bias.detached_copy();
  p.lower = clone_bilstm(lower);
  p.upper = clone_bilstm(upper);
  p.score_weight = score_weight.detached_copy();
  p.zero_grad();
  return p;
}

ModelParams ModelParams::constants() const {
  ModelParams p = clone();
  auto freeze = [](Tensor& t) { t = Tensor::constant(t.value()); };
  for (auto* lstm : {&p.encoder.forward, &p.encoder.backward, &p.lower.forward, &p.lower.backward,
                     &p.upper.forward, &p.upper.backward}) {
    freeze(lstm->input_weights);
    freeze(lstm->recurrent_weights);
    freeze(lstm->bias);
  }
  for (Tensor* t : {&p.attention_weight, &p.attention_bias, &p.match_weight, &p.match_bias, &p.score_weight}) {
    freeze(*t);
  }
  return p;
}

void ModelParams::copy_values_from(const ModelParams& source) {
  std::vector<Tensor> dst = tensors();
  const std::vector<Tensor> src = source.tensors();
  if (dst.size() != src.size()) throw DimensionError("copy_values_from: parameter layouts differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].rows() != src[i].rows() || dst[i].cols() != src[i].cols()) {
      throw DimensionError("copy_values_from: shape mismatch " + dst[i].shape_string() + " vs " +
                           src[i].shape_string());
    }
    dst[i].mutable_value() = src[i].value();
  }
}

void ModelParams::zero_grad() {
  for (Tensor t : tensors()) t.zero_grad();
}

std::size_t expected_parameter_count(const ModelDims& dims) {
  validate(dims);
  const auto l = static_cast<std::size_t>(dims.hidden);
  const auto h = l / 2;
  auto bilstm = [h](std::size_t input) { return 2 * (4 * h * input + 4 * h * h + 4 * h); };
  return bilstm(static_cast<std::size_t>(dims.embedding_dim)) + (l * l + l) + (2 * l * l + l) +
         bilstm(static_cast<std::size_t>(lower_input_width(dims))) + bilstm(l) + l;
}

// ---- building blocks --------------------------------------------------------

Tensor embed(Tape& tape, const Tensor& embeddings, const data::MaskedSequence& seq, const ForwardOptions& options) {
  const std::vector<int> ids = seq.real_ids();
  if (ids.empty()) throw EmptySequenceError("embed: sequence has no real tokens");
  Tensor x = tensor::embedding_lookup(tape, embeddings, ids);
  if (options.dropout > 0.0) {
    if (options.rng == nullptr) throw ContractError("dropout requires an rng");
    std::bernoulli_distribution keep(1.0 - options.dropout);
    Matrix mask(x.rows(), x.cols());
    const double scale = 1.0 / (1.0 - options.dropout);
    for (std::ptrdiff_t i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*options.rng) ? scale : 0.0;
    x = tensor::elementwise_mul(tape, x, Tensor::constant(std::move(mask)));
  }
  return x;
}

Tensor encode_sequence(Tape& tape, const ModelParams& params, const Tensor& x) {
  return tensor::bilstm_encode(tape, x, params.encoder);
}

AttentionResult attention_match(Tape& tape, const ModelParams& params, const Tensor& passage, const Tensor& other,
                                const Mask& other_mask) {
  const auto l = params.dims.hidden;
  if (passage.rows() != l || other.rows() != l) {
    throw DimensionError("attention_match: expected l = " + std::to_string(l) + " rows, got passage " +
                         passage.shape_string() + " and other " + other.shape_string());
  }
  const auto other_len = other.cols();
  const auto passage_len = passage.cols();
  if (!other_mask.empty() && static_cast<std::ptrdiff_t>(other_mask.size()) != other_len) {
    throw DimensionError("attention_match: mask length " + std::to_string(other_mask.size()) +
                         " does not match sequence length " + std::to_string(other_len));
  }
  Tensor projected = tensor::add_bias_broadcast(tape, tensor::matmul(tape, params.attention_weight, other),
                                                params.attention_bias);
  Tensor logits = tensor::matmul(tape, tensor::transpose(tape, projected), passage);  // S x P

  Mask full_mask;
  if (!other_mask.empty()) {
    full_mask.resize(static_cast<std::size_t>(other_len * passage_len));
    for (std::ptrdiff_t r = 0; r < other_len; ++r) {
      std::fill_n(full_mask.begin() + r * passage_len, passage_len, other_mask[static_cast<std::size_t>(r)]);
    }
  }
  AttentionResult result;
  result.weights = tensor::softmax_columns(tape, logits, full_mask);
  result.aligned = tensor::matmul(tape, other, result.weights);
  return result;
}

Tensor match_branch(Tape& tape, const ModelParams& params, const Tensor& passage, const Tensor& aligned) {
  Tensor diff = tensor::elementwise_sub(tape, aligned, passage);
  Tensor prod = tensor::elementwise_mul(tape, aligned, passage);
  Tensor features = tensor::concat_rows(tape, diff, prod);
  Tensor pre = tensor::add_bias_broadcast(tape, tensor::matmul(tape, params.match_weight, features), params.match_bias);
  return tensor::relu(tape, pre);
}

CoMatchResult co_match(Tape& tape, const ModelParams& params, const Tensor& passage, const Tensor& aligned_q,
                       const Tensor& aligned_a) {
  CoMatchResult r;
  r.match_q = match_branch(tape, params, passage, aligned_q);
  r.match_a = match_branch(tape, params, passage, aligned_a);
  r.states = tensor::concat_rows(tape, r.match_q, r.match_a);
  return r;
}

namespace {

// Keeps only the columns whose mask entry is set, preserving order.
Tensor real_columns(Tape& tape, const Tensor& m, const Mask& mask) {
  if (mask.empty()) return m;
  if (static_cast<std::ptrdiff_t>(mask.size()) != m.cols()) {
    throw DimensionError("column mask has " + std::to_string(mask.size()) + " entries for " + m.shape_string());
  }
  if (std::all_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; })) return m;
  std::vector<Tensor> runs;
  std::ptrdiff_t c = 0;
  while (c < m.cols()) {
    if (mask[static_cast<std::size_t>(c)] == 0) {
      ++c;
      continue;
    }
    const std::ptrdiff_t start = c;
    while (c < m.cols() && mask[static_cast<std::size_t>(c)] != 0) ++c;
    runs.push_back(tensor::slice_cols(tape, m, start, c - start));
  }
  if (runs.empty()) throw DegenerateMaskError("every column is masked");
  return runs.size() == 1 ? runs.front() : tensor::concat_cols(tape, runs);
}

Tensor score(Tape& tape, const ModelParams& params, const Tensor& document_vector) {
  return tensor::matmul(tape, tensor::transpose(tape, params.score_weight), document_vector);
}

Tensor stack_scores(Tape& tape, std::span<const Tensor> scores) {
  return tensor::transpose(tape, tensor::concat_cols(tape, scores));
}

void require_candidates(const data::MaskedExample& example) {
  if (example.options.size() < 2) {
    throw ContractError("score_candidates: need at least 2 candidates, got " + std::to_string(example.options.size()));
  }
  if (example.sentence_count == 0 || example.sentence_count > example.sentences.size()) {
    throw EmptySequenceError("score_candidates: example has no passage sentences");
  }
}

std::vector<Tensor> encode_sentences(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                                     const data::MaskedExample& example, const ForwardOptions& options) {
  std::vector<Tensor> encoded;
  encoded.reserve(example.sentence_count);
  for (std::size_t n = 0; n < example.sentence_count; ++n) {
    encoded.push_back(encode_sequence(tape, params, embed(tape, embeddings, example.sentences[n], options)));
  }
  return encoded;
}

data::MaskedSequence whole_passage(const data::MaskedExample& example) {
  data::MaskedSequence seq;
  for (std::size_t n = 0; n < example.sentence_count; ++n) {
    auto ids = example.sentences[n].real_ids();
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  }
  return seq;
}

data::MaskedSequence question_and_option(const data::MaskedExample& example, std::size_t option) {
  data::MaskedSequence seq{example.question.real_ids(), {}};
  auto ids = example.options[option].real_ids();
  seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  return seq;
}

}  // namespace

Tensor sentence_aggregate(Tape& tape, const ModelParams& params, const Tensor& states, const Mask& column_mask) {
  if (states.cols() == 0) throw DegenerateMaskError("sentence_aggregate: empty sentence");
  Tensor real = real_columns(tape, states, column_mask);
  return tensor::row_max_pool(tape, tensor::bilstm_encode(tape, real, params.lower));
}

Tensor document_aggregate(Tape& tape, const ModelParams& params, std::span<const Tensor> sentence_vectors) {
  if (sentence_vectors.empty()) throw EmptySequenceError("document_aggregate: no sentences");
  Tensor stacked = tensor::concat_cols(tape, sentence_vectors);
  return tensor::row_max_pool(tape, tensor::bilstm_encode(tape, stacked, params.upper));
}

// ---- forward passes ---------------------------------------------------------

Tensor full_forward(Tape& tape, const ModelParams& params, const Tensor& embeddings, const data::MaskedExample& example,
                    const ForwardOptions& options) {
  require_candidates(example);
  const Tensor question = encode_sequence(tape, params, embed(tape, embeddings, example.question, options));
  const std::vector<Tensor> passages = encode_sentences(tape, params, embeddings, example, options);

  // The question side of every sentence does not depend on the candidate.
  std::vector<Tensor> match_q;
  match_q.reserve(passages.size());
  for (const Tensor& passage : passages) {
    AttentionResult aq = attention_match(tape, params, passage, question);
    match_q.push_back(match_branch(tape, params, passage, aq.aligned));
  }

  std::vector<Tensor> scores;
  for (const auto& option : example.options) {
    const Tensor answer = encode_sequence(tape, params, embed(tape, embeddings, option, options));
    std::vector<Tensor> sentence_vectors;
    sentence_vectors.reserve(passages.size());
    for (std::size_t n = 0; n < passages.size(); ++n) {
      AttentionResult aa = attention_match(tape, params, passages[n], answer);
      Tensor match_a = match_branch(tape, params, passages[n], aa.aligned);
      Tensor states = tensor::concat_rows(tape, match_q[n], match_a);
      sentence_vectors.push_back(sentence_aggregate(tape, params, states));
    }
    scores.push_back(score(tape, params, document_aggregate(tape, params, sentence_vectors)));
  }
  return stack_scores(tape, scores);
}

Tensor single_match_forward(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                            const data::MaskedExample& example, const ForwardOptions& options) {
  require_candidates(example);
  const std::vector<Tensor> passages = encode_sentences(tape, params, embeddings, example, options);
  std::vector<Tensor> scores;
  for (std::size_t k = 0; k < example.options.size(); ++k) {
    const Tensor joint =
        encode_sequence(tape, params, embed(tape, embeddings, question_and_option(example, k), options));
    std::vector<Tensor> sentence_vectors;
    sentence_vectors.reserve(passages.size());
    for (const Tensor& passage : passages) {
      AttentionResult aa = attention_match(tape, params, passage, joint);
      sentence_vectors.push_back(sentence_aggregate(tape, params, match_branch(tape, params, passage, aa.aligned)));
    }
    scores.push_back(score(tape, params, document_aggregate(tape, params, sentence_vectors)));
  }
  return stack_scores(tape, scores);
}

Tensor flat_aggregate_forward(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                              const data::MaskedExample& example, const ForwardOptions& options) {
  require_candidates(example);
  const Tensor question = encode_sequence(tape, params, embed(tape, embeddings, example.question, options));
  const Tensor passage = encode_sequence(tape, params, embed(tape, embeddings, whole_passage(example), options));
  AttentionResult aq = attention_match(tape, params, passage, question);
  const Tensor match_q = match_branch(tape, params, passage, aq.aligned);

  std::vector<Tensor> scores;
  for (const auto& option : example.options) {
    const Tensor answer = encode_sequence(tape, params, embed(tape, embeddings, option, options));
    AttentionResult aa = attention_match(tape, params, passage, answer);
    Tensor states = tensor::concat_rows(tape, match_q, match_branch(tape, params, passage, aa.aligned));
    Tensor first = tensor::bilstm_encode(tape, states, params.lower);
    Tensor second = tensor::bilstm_encode(tape, first, params.upper);
    scores.push_back(score(tape, params, tensor::row_max_pool(tape, second)));
  }
  return stack_scores(tape, scores);
}

Tensor score_candidates(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                        const data::MaskedExample& example, const ForwardOptions& options) {
  if (embeddings.rows() != params.dims.embedding_dim) {
    throw DimensionError("embedding table " + embeddings.shape_string() + " does not match d = " +
                         std::to_string(params.dims.embedding_dim));
  }
  switch (params.dims.variant) {
    case Variant::full:
      return full_forward(tape, params, embeddings, example, options);
    case Variant::single_match:
      return single_match_forward(tape, params, embeddings, example, options);
    case Variant::flat:
      return flat_aggregate_forward(tape, params, embeddings, example, options);
  }
  throw ConfigError("unknown variant");
}

std::vector<CoMatchResult> inspect_attention(Tape& tape, const ModelParams& params, const Tensor& embeddings,
                                             const data::MaskedExample& example, std::size_t option) {
  require_candidates(example);
  if (option >= example.options.size()) {
    throw ContractError("inspect_attention: option " + std::to_string(option) + " out of range");
  }
  std::vector<Tensor> passages;
  if (params.dims.variant == Variant::flat) {
    passages.push_back(encode_sequence(tape, params, embed(tape, embeddings, whole_passage(example))));
  } else {
    passages = encode_sentences(tape, params, embeddings, example, {});
  }

  std::vector<CoMatchResult> out;
  if (params.dims.variant == Variant::single_match) {
    const Tensor joint = encode_sequence(tape, params, embed(tape, embeddings, question_and_option(example, option)));
    for (const Tensor& passage : passages) {
      CoMatchResult r;
      r.answer = attention_match(tape, params, passage, joint);
      r.match_a = match_branch(tape, params, passage, r.answer.aligned);
      r.states = r.match_a;
      out.push_back(std::move(r));
    }
    return out;
  }
  const Tensor question = encode_sequence(tape, params, embed(tape, embeddings, example.question));
  const Tensor answer = encode_sequence(tape, params, embed(tape, embeddings, example.options[option]));
  for (const Tensor& passage : passages) {
    AttentionResult aq = attention_match(tape, params, passage, question);
    AttentionResult aa = attention_match(tape, params, passage, answer);
    CoMatchResult r = co_match(tape, params, passage, aq.aligned, aa.aligned);
    r.question = aq;
    r.answer = aa;
    out.push_back(std::move(r));
  }
  return out;
}

// ---- loss and prediction ------------------------------------------------------

Tensor candidate_loss(Tape& tape, const Tensor& scores, std::size_t gold) {
  return tensor::softmax_cross_entropy(tape, scores, gold);
}

std::size_t predict(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("predict: no scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::size_t predict(const Tensor& scores) {
  const Matrix& v = scores.value();
  return predict(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

std::vector<std::string> bucket_by_question_type(std::span<const std::string> question_tokens) {
  static constexpr std::array<std::string_view, 9> kKeywords{"why", "what", "when", "where", "who",
                                                             "how", "true", "not",  "title"};
  std::vector<std::string> tags;
  for (std::string_view key : kKeywords) {
    const bool present = std::any_of(question_tokens.begin(), question_tokens.end(),
                                     [&](const std::string& tok) { return tok == key; });
    if (present) tags.emplace_back(key);
  }
  if (tags.empty()) tags.emplace_back("other");
  return tags;
}

}  // namespace comatch::model
