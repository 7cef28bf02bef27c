#pragma once

#include <cstdint>
#include <vector>

#include "comatch/data.hpp"

namespace comatch::data {

struct SyntheticSpec {
  std::size_t examples = 32;
  int vocab_size = 50;  // real tokens, excluding PAD/UNK
  std::size_t sentences = 3;
  std::size_t sentence_length = 5;
  std::size_t options = 4;
};

// Passage = `sentences` sentences of random tokens; the gold option is a copy
// of one passage sentence and the distractors are random token strings of the
// same length. Gold position and the copied sentence are drawn uniformly.
// Token ids are in [2, 2 + vocab_size).
std::vector<EncodedExample> synthetic_copy_task(const SyntheticSpec& spec, std::uint64_t seed);

// Vocabulary "<pad>", "<unk>", "w0", "w1", ... matching synthetic_copy_task ids.
Vocabulary synthetic_vocabulary(const SyntheticSpec& spec);

}  // namespace comatch::data
