#pragma once

// The end-to-end gradient check on a tiny randomly drawn instance, shared by
// the `gradcheck` command and the test suites.

#include <cstdint>
#include <vector>

#include "comatch/data.hpp"
#include "comatch/grad_check.hpp"
#include "comatch/model.hpp"

namespace comatch::model {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckInstance {
  ModelParams params;
  Tensor embeddings;  // trainable, so it is checked as one more group
  data::EncodedExample example;
};

// d=3, l=4, two passage sentences of 1..4 tokens, a 3-token question and two
// candidates of 1..3 tokens. Weights are redrawn uniform in [-1, 1],
// embeddings in [-2, 2] and the score vector in [-3, 3] to keep gradients
// clear of finite-difference roundoff where possible.
GradCheckInstance tiny_grad_check_instance(std::uint64_t seed, Variant variant = Variant::full);

// One entry per parameter group (plus "embedding"), in ModelParams order.
std::vector<tensor::GradCheckEntry> end_to_end_grad_check(std::uint64_t seed, double eps = 1e-5,
                                                          Variant variant = Variant::full);

}  // namespace comatch::model
