#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace comatch {

// Every random draw in the project comes from a named substream of one
// user-supplied seed ("init", "shuffle", "embedding-fill", ...), so changing
// how one consumer draws never perturbs another.
std::mt19937_64 substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

}  // namespace comatch
