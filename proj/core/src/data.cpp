#include "comatch/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include "json.hpp"

#include "comatch/errors.hpp"
#include "comatch/random.hpp"

namespace comatch::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view subset_name(Subset s) {
  switch (s) {
    case Subset::middle:
      return "middle";
    case Subset::high:
      return "high";
    case Subset::unknown:
      break;
  }
  return "unknown";
}

// ---- RACE loading ---------------------------------------------------------

namespace {

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ParseError(file.string() + ": cannot open");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

const json& require_field(const json& doc, const char* key, const std::string& source) {
  auto it = doc.find(key);
  if (it == doc.end()) throw ValidationError(source + ": missing field \"" + key + "\"");
  return *it;
}

std::string require_string(const json& value, const std::string& source, const std::string& path) {
  if (!value.is_string()) throw ValidationError(source + ": " + path + " must be a string");
  return value.get<std::string>();
}

Subset subset_from_path(const fs::path& file) {
  for (const auto& part : file) {
    if (part == "middle") return Subset::middle;
    if (part == "high") return Subset::high;
  }
  return Subset::unknown;
}

}  // namespace

std::vector<RawExample> parse_race_article(std::string_view json_text, const std::string& source_name,
                                           Subset subset, bool require_answers) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(source_name + ": " + e.what());
  }
  if (!doc.is_object()) throw ValidationError(source_name + ": top level must be an object");

  const std::string article = require_string(require_field(doc, "article", source_name), source_name, "article");
  std::string article_id = source_name;
  if (auto it = doc.find("id"); it != doc.end()) article_id = require_string(*it, source_name, "id");

  const json& questions = require_field(doc, "questions", source_name);
  const json& options = require_field(doc, "options", source_name);
  if (!questions.is_array()) throw ValidationError(source_name + ": questions must be an array");
  if (!options.is_array() || options.size() != questions.size()) {
    throw ValidationError(source_name + ": options must be an array with one entry per question");
  }
  const json* answers = nullptr;
  if (auto it = doc.find("answers"); it != doc.end()) {
    answers = &*it;
    if (!answers->is_array() || answers->size() != questions.size()) {
      throw ValidationError(source_name + ": answers must be an array with one entry per question");
    }
  } else if (require_answers) {
    throw ValidationError(source_name + ": missing field \"answers\"");
  }

  std::vector<RawExample> out;
  out.reserve(questions.size());
  for (std::size_t q = 0; q < questions.size(); ++q) {
    const std::string at = "[" + std::to_string(q) + "]";
    RawExample ex;
    ex.id = article_id + "#" + std::to_string(q);
    ex.article = article;
    ex.subset = subset;
    ex.question = require_string(questions[q], source_name, "questions" + at);
    if (!options[q].is_array() || options[q].empty()) {
      throw ValidationError(source_name + ": options" + at + " must be a non-empty array");
    }
    for (std::size_t k = 0; k < options[q].size(); ++k) {
      ex.options.push_back(require_string(options[q][k], source_name, "options" + at + "[" + std::to_string(k) + "]"));
    }
    if (answers != nullptr) {
      const std::string letter = require_string((*answers)[q], source_name, "answers" + at);
      if (letter.size() != 1 || letter[0] < 'A' || letter[0] > 'D') {
        throw ValidationError(source_name + ": answers" + at + " = \"" + letter + "\" is not a letter A-D");
      }
      ex.gold = letter[0] - 'A';
      if (static_cast<std::size_t>(ex.gold) >= ex.options.size()) {
        throw ValidationError(source_name + ": answers" + at + " = \"" + letter + "\" but only " +
                              std::to_string(ex.options.size()) + " options");
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<RawExample> load_race_file(const fs::path& file, Subset subset, bool require_answers) {
  return parse_race_article(read_file(file), file.string(), subset, require_answers);
}

std::vector<RawExample> load_race_dir(const fs::path& dir, unsigned threads) {
  if (!fs::is_directory(dir)) throw ParseError(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<std::vector<RawExample>> per_file(files.size());
  auto load_range = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < files.size(); i += step) {
      per_file[i] = load_race_file(files[i], subset_from_path(fs::relative(files[i], dir)));
    }
  };
  threads = std::max(1u, threads);
  if (threads == 1) {
    load_range(0, 1);
  } else {
    std::vector<std::future<void>> jobs;
    for (unsigned t = 0; t < threads; ++t) jobs.push_back(std::async(std::launch::async, load_range, t, threads));
    for (auto& job : jobs) job.get();
  }

  std::vector<RawExample> out;
  for (auto& group : per_file) {
    for (auto& ex : group) out.push_back(std::move(ex));
  }
  return out;
}

// ---- text -----------------------------------------------------------------

namespace {

bool is_ascii_punct(char ch) {
  const auto u = static_cast<unsigned char>(ch);
  return u < 128 && std::ispunct(u) != 0;
}

bool is_space(char ch) { return std::isspace(static_cast<unsigned char>(ch)) != 0; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    std::string_view chunk = text.substr(start, i - start);
    if (chunk.empty()) continue;

    std::size_t lead = 0;
    while (lead < chunk.size() && is_ascii_punct(chunk[lead])) ++lead;
    std::size_t trail = chunk.size();
    while (trail > lead && is_ascii_punct(chunk[trail - 1])) --trail;

    for (std::size_t k = 0; k < lead; ++k) tokens.emplace_back(1, chunk[k]);
    if (trail > lead) {
      std::string core(chunk.substr(lead, trail - lead));
      for (char& ch : core) {
        if (static_cast<unsigned char>(ch) < 128) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      }
      tokens.push_back(std::move(core));
    }
    for (std::size_t k = trail; k < chunk.size(); ++k) tokens.emplace_back(1, chunk[k]);
  }
  return tokens;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> sentences;
  auto emit = [&](std::size_t begin, std::size_t end) {
    while (begin < end && is_space(text[begin])) ++begin;
    while (end > begin && is_space(text[end - 1])) --end;
    if (end > begin) sentences.emplace_back(text.substr(begin, end - begin));
  };
  std::size_t begin = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch != '.' && ch != '!' && ch != '?') continue;
    if (i + 1 == text.size() || is_space(text[i + 1])) {
      emit(begin, i + 1);
      begin = i + 1;
    }
  }
  emit(begin, text.size());
  return sentences;
}

// ---- vocabulary -----------------------------------------------------------

Vocabulary::Vocabulary() {
  add(std::string(kPadToken));
  add(std::string(kUnkToken));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
    throw FormatError("vocabulary must start with the reserved tokens <pad>, <unk>");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) throw FormatError("vocabulary token repeated: \"" + tokens[i] + "\"");
    v.add(std::move(tokens[i]));
  }
  return v;
}

int Vocabulary::add(std::string token) {
  const int id = static_cast<int>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
  return id;
}

int Vocabulary::index_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= tokens_.size()) {
    throw ContractError("vocabulary index " + std::to_string(index) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(index)];
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

Vocabulary build_vocab_from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t min_count) {
  if (min_count < 1) throw ConfigError("build_vocab: min_count must be >= 1");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [token, count] : counts) {
    if (count >= min_count && token != Vocabulary::kPadToken && token != Vocabulary::kUnkToken) {
      kept.emplace_back(token, count);
    }
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens{std::string(Vocabulary::kPadToken), std::string(Vocabulary::kUnkToken)};
  for (auto& [token, count] : kept) tokens.push_back(std::move(token));
  return Vocabulary::from_tokens(std::move(tokens));
}

Vocabulary build_vocab(const std::vector<RawExample>& examples, std::size_t min_count) {
  std::unordered_map<std::string, std::size_t> counts;
  auto count = [&](std::string_view text) {
    for (auto& tok : tokenize(text)) ++counts[tok];
  };
  // An article is shared by all its questions; count it once.
  const std::string* last_article = nullptr;
  for (const auto& ex : examples) {
    if (last_article == nullptr || *last_article != ex.article) count(ex.article);
    last_article = &ex.article;
    count(ex.question);
    for (const auto& opt : ex.options) count(opt);
  }
  return build_vocab_from_counts(counts, min_count);
}

// ---- embeddings -----------------------------------------------------------

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    const std::size_t start = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > start) fields.push_back(line.substr(start, i - start));
  }
  return fields;
}

std::optional<long long> parse_integer(std::string_view s) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

double parse_double(std::string_view s, const std::string& where) {
  // from_chars for double is not available everywhere; strtod on a copy is.
  std::string copy(s);
  char* end = nullptr;
  const double v = std::strtod(copy.c_str(), &end);
  if (end != copy.c_str() + copy.size()) throw FormatError(where + ": \"" + copy + "\" is not a number");
  return v;
}

tensor::Matrix random_fill(std::size_t columns, std::ptrdiff_t d, std::uint64_t seed) {
  auto rng = substream(seed, "embedding-fill");
  std::uniform_real_distribution<double> dist(-0.1, 0.1);
  tensor::Matrix m(d, static_cast<std::ptrdiff_t>(columns));
  // Column-major draw order so a column's values do not depend on d's layout.
  for (std::ptrdiff_t c = 0; c < m.cols(); ++c)
    for (std::ptrdiff_t r = 0; r < d; ++r) m(r, c) = dist(rng);
  return m;
}

}  // namespace

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::ptrdiff_t d, std::uint64_t seed) {
  if (d < 1) throw ConfigError("embedding dimension must be >= 1");
  EmbeddingTable table;
  table.vectors = random_fill(vocab.size(), d, seed);
  table.vectors.col(Vocabulary::kPad).setZero();
  return table;
}

EmbeddingTable load_embeddings(const fs::path& file, const Vocabulary& vocab, std::ptrdiff_t d,
                               std::uint64_t seed) {
  std::ifstream in(file);
  if (!in) throw ParseError(file.string() + ": cannot open");
  EmbeddingTable table = random_embeddings(vocab, d, seed);
  std::vector<std::uint8_t> found(vocab.size(), 0);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    const std::string where = file.string() + ":" + std::to_string(line_no);
    if (line_no == 1 && fields.size() == 2) {
      auto header_dim = parse_integer(fields[1]);
      if (header_dim && parse_integer(fields[0]) && *header_dim == d) continue;
    }
    if (static_cast<std::ptrdiff_t>(fields.size()) != d + 1) {
      throw FormatError(where + ": expected " + std::to_string(d) + " values, found " +
                        std::to_string(fields.size() - 1));
    }
    const int id = vocab.index_of(fields[0]);
    if (id == Vocabulary::kUnk && fields[0] != Vocabulary::kUnkToken) continue;
    if (id == Vocabulary::kPad || found[static_cast<std::size_t>(id)]) continue;
    for (std::ptrdiff_t r = 0; r < d; ++r) table.vectors(r, id) = parse_double(fields[static_cast<std::size_t>(r) + 1], where);
    found[static_cast<std::size_t>(id)] = 1;
  }
  std::size_t matched = 0;
  for (std::size_t i = 2; i < found.size(); ++i) matched += found[i];
  table.coverage = vocab.size() > 2 ? static_cast<double>(matched) / static_cast<double>(vocab.size() - 2) : 0.0;
  return table;
}

// ---- encoding and batching ------------------------------------------------

namespace {

std::vector<int> to_ids(const std::vector<std::string>& tokens, const Vocabulary& vocab, std::size_t cap) {
  std::vector<int> ids;
  const std::size_t n = std::min(tokens.size(), cap);
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(vocab.index_of(tokens[i]));
  return ids;
}

}  // namespace

std::vector<std::vector<std::string>> passage_sentences(std::string_view article, std::size_t cap) {
  std::vector<std::vector<std::string>> out;
  for (const auto& sentence : split_sentences(article)) {
    auto tokens = tokenize(sentence);
    if (tokens.size() > cap) tokens.resize(cap);
    if (!tokens.empty()) out.push_back(std::move(tokens));
  }
  return out;
}

EncodedExample encode_example(const RawExample& raw, const Vocabulary& vocab, const TruncationCaps& caps) {
  EncodedExample ex;
  ex.id = raw.id;
  ex.gold = raw.gold;
  ex.subset = raw.subset;
  for (const auto& tokens : passage_sentences(raw.article, caps.sentence)) {
    ex.sentences.push_back(to_ids(tokens, vocab, tokens.size()));
  }
  if (ex.sentences.empty()) throw ValidationError("example " + raw.id + " has no non-empty passage sentence");
  ex.question_tokens = tokenize(raw.question);
  ex.question = to_ids(ex.question_tokens, vocab, caps.question);
  // Empty strings still need one position to attend to.
  if (ex.question.empty()) ex.question.push_back(Vocabulary::kUnk);
  for (const auto& option : raw.options) {
    auto ids = to_ids(tokenize(option), vocab, caps.option);
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    ex.options.push_back(std::move(ids));
  }
  return ex;
}

std::vector<int> MaskedSequence::real_ids() const {
  if (mask.empty()) return ids;
  std::vector<int> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mask[i] != 0) out.push_back(ids[i]);
  }
  return out;
}

std::size_t MaskedSequence::real_length() const {
  if (mask.empty()) return ids.size();
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

MaskedExample to_masked(const EncodedExample& example) {
  MaskedExample out;
  for (const auto& s : example.sentences) out.sentences.push_back({s, {}});
  out.sentence_count = example.sentences.size();
  out.question = {example.question, {}};
  for (const auto& o : example.options) out.options.push_back({o, {}});
  return out;
}

MaskedExample Batch::example(std::size_t b) const {
  MaskedExample out;
  for (std::size_t n = 0; n < sentences[b].size(); ++n) out.sentences.push_back({sentences[b][n], sentence_masks[b][n]});
  out.sentence_count = sentence_counts[b];
  out.question = {questions[b], question_masks[b]};
  for (std::size_t k = 0; k < options[b].size(); ++k) out.options.push_back({options[b][k], option_masks[b][k]});
  return out;
}

namespace {

void pad_into(const std::vector<int>& ids, std::size_t width, std::vector<int>& out, tensor::Mask& mask) {
  out.assign(width, Vocabulary::kPad);
  mask.assign(width, 0);
  std::copy(ids.begin(), ids.end(), out.begin());
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(ids.size()), 1);
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t stream_index) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto rng = substream(seed, "shuffle", stream_index);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch batch;
    std::size_t max_sentences = 0, max_sentence_len = 0, max_question = 0, max_options = 0, max_option_len = 0;
    for (std::size_t i = start; i < end; ++i) {
      const auto& ex = examples[order[i]];
      max_sentences = std::max(max_sentences, ex.sentences.size());
      for (const auto& s : ex.sentences) max_sentence_len = std::max(max_sentence_len, s.size());
      max_question = std::max(max_question, ex.question.size());
      max_options = std::max(max_options, ex.options.size());
      for (const auto& o : ex.options) max_option_len = std::max(max_option_len, o.size());
    }
    for (std::size_t i = start; i < end; ++i) {
      const auto& ex = examples[order[i]];
      batch.example_index.push_back(order[i]);
      batch.gold.push_back(ex.gold);
      batch.sentence_counts.push_back(ex.sentences.size());

      auto& sents = batch.sentences.emplace_back(max_sentences);
      auto& smasks = batch.sentence_masks.emplace_back(max_sentences);
      for (std::size_t n = 0; n < max_sentences; ++n) {
        static const std::vector<int> kNone;
        pad_into(n < ex.sentences.size() ? ex.sentences[n] : kNone, max_sentence_len, sents[n], smasks[n]);
      }
      pad_into(ex.question, max_question, batch.questions.emplace_back(), batch.question_masks.emplace_back());

      if (ex.options.size() != max_options) {
        throw ValidationError("example " + ex.id + " has " + std::to_string(ex.options.size()) +
                              " options; batch expects " + std::to_string(max_options));
      }
      auto& opts = batch.options.emplace_back(max_options);
      auto& omasks = batch.option_masks.emplace_back(max_options);
      for (std::size_t k = 0; k < max_options; ++k) pad_into(ex.options[k], max_option_len, opts[k], omasks[k]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace comatch::data
