#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>

#include "prompt_pet/autograd.hpp"

namespace prompt_pet {

// Trainable soft-prompt generator. Free vectors p'_0..p'_{n-1} run through a
// two-layer bidirectional LSTM; each position's forward and backward states
// are concatenated and mapped by Linear -> ReLU -> Linear to the backbone's
// embedding width.
class ReparamBlock {
public:
    static constexpr double kRawInitScale = 0.02;

    // Throws std::invalid_argument on zero sizes. d_out == 0 means d_hidden.
    static ReparamBlock init(std::size_t n_tokens, std::size_t d_hidden, std::uint64_t seed,
                             std::size_t d_out = 0);

    std::size_t n_tokens() const { return n_tokens_; }
    std::size_t d_hidden() const { return d_hidden_; }
    std::size_t d_out() const { return d_out_; }
    std::uint64_t seed() const { return seed_; }

    // n_tokens × d_out prompt embeddings. Throws std::domain_error when any
    // parameter is non-finite.
    Var forward(Graph& g);
    Matrix forward() const;

    ParameterList parameters();
    Parameter& raw_params() { return raw_; }

    void save(const std::filesystem::path& dir) const;
    static ReparamBlock load(const std::filesystem::path& dir);

private:
    struct LstmDirection {
        Parameter w_ih;  // in × 4h, gate order i, f, g, o
        Parameter w_hh;  // h × 4h
        Parameter bias;  // 1 × 4h
    };

    ReparamBlock() = default;
    Var run_direction(Graph& g, Var inputs, LstmDirection& dir, bool reverse,
                      std::vector<Var>& states);

    std::size_t n_tokens_ = 0;
    std::size_t d_hidden_ = 0;
    std::size_t d_out_ = 0;
    std::uint64_t seed_ = 0;
    Parameter raw_;
    std::array<std::array<LstmDirection, 2>, 2> lstm_;  // [layer][forward/backward]
    Parameter mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

}  // namespace prompt_pet
