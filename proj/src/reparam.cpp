#include "prompt_pet/reparam.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "prompt_pet/checkpoint.hpp"
#include "prompt_pet/random.hpp"

namespace prompt_pet {

ReparamBlock ReparamBlock::init(std::size_t n_tokens, std::size_t d_hidden, std::uint64_t seed,
                                std::size_t d_out) {
    if (n_tokens == 0 || d_hidden == 0) {
        throw std::invalid_argument("reparameterization block sizes must be positive");
    }
    ReparamBlock b;
    b.n_tokens_ = n_tokens;
    b.d_hidden_ = d_hidden;
    b.d_out_ = d_out == 0 ? d_hidden : d_out;
    b.seed_ = seed;
    Rng rng(mix_seed(seed, 0x12E9));
    const std::size_t h = d_hidden;
    b.raw_ = Parameter("raw", normal_matrix(n_tokens, h, kRawInitScale, rng));
    const double lstm_bound = 1.0 / std::sqrt(static_cast<double>(h));
    for (std::size_t layer = 0; layer < 2; ++layer) {
        const std::size_t in = layer == 0 ? h : 2 * h;
        for (std::size_t d = 0; d < 2; ++d) {
            const std::string prefix =
                "lstm.l" + std::to_string(layer) + (d == 0 ? ".fwd" : ".bwd");
            auto& dir = b.lstm_[layer][d];
            dir.w_ih = Parameter(prefix + ".w_ih", uniform_matrix(in, 4 * h, lstm_bound, rng));
            dir.w_hh = Parameter(prefix + ".w_hh", uniform_matrix(h, 4 * h, lstm_bound, rng));
            dir.bias = Parameter(prefix + ".bias", uniform_matrix(1, 4 * h, lstm_bound, rng));
        }
    }
    const double b1 = 1.0 / std::sqrt(static_cast<double>(2 * h));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(h));
    b.mlp_w1_ = Parameter("mlp.w1", uniform_matrix(2 * h, h, b1, rng));
    b.mlp_b1_ = Parameter("mlp.b1", uniform_matrix(1, h, b1, rng));
    b.mlp_w2_ = Parameter("mlp.w2", uniform_matrix(h, b.d_out_, b2, rng));
    b.mlp_b2_ = Parameter("mlp.b2", uniform_matrix(1, b.d_out_, b2, rng));
    return b;
}

ParameterList ReparamBlock::parameters() {
    ParameterList out{&raw_};
    for (auto& layer : lstm_) {
        for (auto& dir : layer) {
            out.push_back(&dir.w_ih);
            out.push_back(&dir.w_hh);
            out.push_back(&dir.bias);
        }
    }
    out.insert(out.end(), {&mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_});
    return out;
}

Var ReparamBlock::run_direction(Graph& g, Var inputs, LstmDirection& dir, bool reverse,
                                std::vector<Var>& states) {
    const std::size_t h = d_hidden_;
    const std::size_t n = n_tokens_;
    Var projected = ops::add_row(ops::matmul(inputs, g.parameter(dir.w_ih)), g.parameter(dir.bias));
    Var w_hh = g.parameter(dir.w_hh);
    states.assign(n, Var());
    Var hidden, cell;
    for (std::size_t step = 0; step < n; ++step) {
        const std::size_t t = reverse ? n - 1 - step : step;
        Var gates = ops::slice_rows(projected, t, 1);
        if (hidden.valid()) gates = ops::add(gates, ops::matmul(hidden, w_hh));
        Var in_gate = ops::sigmoid(ops::slice_cols(gates, 0, h));
        Var forget_gate = ops::sigmoid(ops::slice_cols(gates, h, h));
        Var candidate = ops::tanh(ops::slice_cols(gates, 2 * h, h));
        Var out_gate = ops::sigmoid(ops::slice_cols(gates, 3 * h, h));
        Var fresh = ops::mul(in_gate, candidate);
        cell = cell.valid() ? ops::add(ops::mul(forget_gate, cell), fresh) : fresh;
        hidden = ops::mul(out_gate, ops::tanh(cell));
        states[t] = hidden;
    }
    return hidden;
}

Var ReparamBlock::forward(Graph& g) {
    for (Parameter* p : parameters()) {
        if (!p->value.all_finite()) {
            throw std::domain_error("non-finite value in reparameterization parameter " + p->name);
        }
    }
    Var x = g.parameter(raw_);
    std::vector<Var> fwd, bwd;
    for (auto& layer : lstm_) {
        run_direction(g, x, layer[0], false, fwd);
        run_direction(g, x, layer[1], true, bwd);
        std::vector<Var> rows;
        rows.reserve(n_tokens_);
        for (std::size_t t = 0; t < n_tokens_; ++t) {
            const Var pair[2] = {fwd[t], bwd[t]};
            rows.push_back(ops::concat_cols(pair));
        }
        x = ops::concat_rows(rows);
    }
    Var hidden = ops::relu(ops::add_row(ops::matmul(x, g.parameter(mlp_w1_)), g.parameter(mlp_b1_)));
    return ops::add_row(ops::matmul(hidden, g.parameter(mlp_w2_)), g.parameter(mlp_b2_));
}

Matrix ReparamBlock::forward() const {
    Graph g(false);
    // Parameters are only read on a non-tracking graph.
    return const_cast<ReparamBlock*>(this)->forward(g).value();
}

void ReparamBlock::save(const std::filesystem::path& dir) const {
    auto* self = const_cast<ReparamBlock*>(this);
    save_arrays(dir / "params.bin", collect_arrays(self->parameters()));
    nlohmann::json manifest{{"type", "reparam"},
                            {"n_tokens", n_tokens_},
                            {"d_hidden", d_hidden_},
                            {"d_out", d_out_},
                            {"seed", seed_}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

ReparamBlock ReparamBlock::load(const std::filesystem::path& dir) {
    const auto manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    ReparamBlock b = init(manifest.at("n_tokens").get<std::size_t>(),
                          manifest.at("d_hidden").get<std::size_t>(),
                          manifest.at("seed").get<std::uint64_t>(),
                          manifest.at("d_out").get<std::size_t>());
    assign_arrays(b.parameters(), load_arrays(dir / "params.bin"));
    return b;
}

}  // namespace prompt_pet
