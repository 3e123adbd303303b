#include "prompt_pet/random.hpp"

namespace prompt_pet {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : m.values()) v = dist(rng);
    return m;
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
    Matrix m(rows, cols);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : m.values()) v = dist(rng);
    return m;
}

}  // namespace prompt_pet
