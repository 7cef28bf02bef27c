#include "comatch/synthetic.hpp"

#include "comatch/random.hpp"

namespace comatch::data {

std::vector<EncodedExample> synthetic_copy_task(const SyntheticSpec& spec, std::uint64_t seed) {
  auto rng = substream(seed, "synthetic");
  std::uniform_int_distribution<int> token(2, 2 + spec.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> pick_sentence(0, spec.sentences - 1);
  std::uniform_int_distribution<std::size_t> pick_gold(0, spec.options - 1);
  auto random_sequence = [&] {
    std::vector<int> ids(spec.sentence_length);
    for (int& id : ids) id = token(rng);
    return ids;
  };

  std::vector<EncodedExample> out;
  for (std::size_t e = 0; e < spec.examples; ++e) {
    EncodedExample ex;
    ex.id = "synthetic#" + std::to_string(e);
    for (std::size_t n = 0; n < spec.sentences; ++n) ex.sentences.push_back(random_sequence());
    ex.question = random_sequence();
    ex.question_tokens = {"which", "sentence", "appears", "?"};
    const std::size_t source = pick_sentence(rng);
    ex.gold = static_cast<int>(pick_gold(rng));
    for (std::size_t k = 0; k < spec.options; ++k) {
      ex.options.push_back(k == static_cast<std::size_t>(ex.gold) ? ex.sentences[source] : random_sequence());
    }
    ex.subset = e % 2 == 0 ? Subset::middle : Subset::high;
    out.push_back(std::move(ex));
  }
  return out;
}

Vocabulary synthetic_vocabulary(const SyntheticSpec& spec) {
  std::vector<std::string> tokens{std::string(Vocabulary::kPadToken), std::string(Vocabulary::kUnkToken)};
  for (int i = 0; i < spec.vocab_size; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocabulary::from_tokens(std::move(tokens));
}

}  // namespace comatch::data
