#pragma once

#include <cstdint>
#include <random>

#include "prompt_pet/tensor.hpp"

namespace prompt_pet {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a salt.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng);

}  // namespace prompt_pet
