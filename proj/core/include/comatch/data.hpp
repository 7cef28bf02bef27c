#pragma once

// RACE ingestion, tokenization, vocabulary, embeddings and batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "comatch/tensor.hpp"

namespace comatch::data {

enum class Subset { middle, high, unknown };

std::string_view subset_name(Subset s);

struct RawExample {
  std::string id;  // "<article id>#<question index>"
  std::string article;
  std::string question;
  std::vector<std::string> options;
  int gold = -1;  // -1 when the file carried no answer
  Subset subset = Subset::unknown;
};

// Parses one RACE article document. When `require_answers` is false the
// "answers" field may be absent and gold stays -1.
std::vector<RawExample> parse_race_article(std::string_view json_text, const std::string& source_name,
                                           Subset subset, bool require_answers = true);
std::vector<RawExample> load_race_file(const std::filesystem::path& file, Subset subset,
                                       bool require_answers = true);

// Loads every regular file below `dir`. Results come back in sorted path
// order however many threads read them. Files under a directory named
// "middle" or "high" carry that subset tag.
std::vector<RawExample> load_race_dir(const std::filesystem::path& dir, unsigned threads = 1);

// Lowercases, splits on whitespace, and peels leading/trailing ASCII
// punctuation off each chunk as one-character tokens.
std::vector<std::string> tokenize(std::string_view text);

// Breaks after '.', '!' or '?' when followed by whitespace or end of text.
std::vector<std::string> split_sentences(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary();
  // Rebuilds from an index-ordered token list whose first two entries are
  // the reserved tokens (the checkpoint layout).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  int index_of(std::string_view token) const;
  const std::string& token(int index) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(std::string_view token) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  int add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Counts tokens over articles, questions and options. Tokens seen at least
// min_count times are indexed by descending frequency, ties lexicographic.
Vocabulary build_vocab(const std::vector<RawExample>& examples, std::size_t min_count = 1);
Vocabulary build_vocab_from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t min_count = 1);

struct EmbeddingTable {
  tensor::Matrix vectors;  // d x |V|, PAD column zero
  double coverage = 0.0;   // fraction of non-reserved tokens found in the file

  std::ptrdiff_t dim() const { return vectors.rows(); }
};

// Reads "token v1 ... vd" lines (an optional "count dim" header is skipped).
// Tokens missing from the file get uniform[-0.1, 0.1] draws from the
// "embedding-fill" substream of `seed`.
EmbeddingTable load_embeddings(const std::filesystem::path& file, const Vocabulary& vocab, std::ptrdiff_t d,
                               std::uint64_t seed);
// All columns random (no file); coverage 0.
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::ptrdiff_t d, std::uint64_t seed);

struct TruncationCaps {
  std::size_t sentence = 50;
  std::size_t question = 30;
  std::size_t option = 20;
};

struct EncodedExample {
  std::string id;
  std::vector<std::vector<int>> sentences;
  std::vector<int> question;
  std::vector<std::vector<int>> options;
  std::vector<std::string> question_tokens;  // before vocabulary lookup, for type bucketing
  int gold = -1;
  Subset subset = Subset::unknown;
};

// Tokenized passage sentences as encode_example keeps them: each truncated to
// `cap` tokens, empty ones dropped.
std::vector<std::vector<std::string>> passage_sentences(std::string_view article, std::size_t cap);

EncodedExample encode_example(const RawExample& raw, const Vocabulary& vocab, const TruncationCaps& caps = {});

// Token ids plus a real-token mask (empty mask = every position real).
struct MaskedSequence {
  std::vector<int> ids;
  tensor::Mask mask;

  std::vector<int> real_ids() const;
  std::size_t real_length() const;
};

// What the model consumes: one example, possibly padded.
struct MaskedExample {
  std::vector<MaskedSequence> sentences;
  std::size_t sentence_count = 0;  // leading entries of `sentences` that are real
  MaskedSequence question;
  std::vector<MaskedSequence> options;
};

MaskedExample to_masked(const EncodedExample& example);

struct Batch {
  std::vector<std::size_t> example_index;  // positions in the source list
  // [b][n][t]; every sentence padded to the batch maximum length and every
  // example padded to the batch maximum sentence count.
  std::vector<std::vector<std::vector<int>>> sentences;
  std::vector<std::vector<tensor::Mask>> sentence_masks;
  std::vector<std::size_t> sentence_counts;
  std::vector<std::vector<int>> questions;
  std::vector<tensor::Mask> question_masks;
  std::vector<std::vector<std::vector<int>>> options;  // [b][k][t]
  std::vector<std::vector<tensor::Mask>> option_masks;
  std::vector<int> gold;

  std::size_t size() const { return example_index.size(); }
  MaskedExample example(std::size_t b) const;
};

// Shuffles with the "shuffle" substream of (seed, stream_index), then cuts
// consecutive groups of batch_size and pads each.
std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t stream_index = 0);

}  // namespace comatch::data
