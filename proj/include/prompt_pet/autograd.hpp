#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prompt_pet/tensor.hpp"

namespace prompt_pet {

// A named trainable array. `grad` stays empty until a backward pass reaches it.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}

    void zero_grad() { grad = Matrix(); }
    Matrix& grad_buffer();
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(std::span<Parameter* const> params);

class Graph;

// Handle to a node on a Graph tape.
class Var {
public:
    Var() = default;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    Graph* graph() const { return graph_; }
    std::size_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// insertion order is a valid topological order for backward().
// With gradient tracking disabled no closures are recorded and parameters
// are read-only inputs.
class Graph {
public:
    using Backward = std::function<void(Graph&, const Matrix& out_grad)>;

    explicit Graph(bool track_gradients = true) : tracking_(track_gradients) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool tracking() const { return tracking_; }

    Var constant(Matrix value);
    Var parameter(Parameter& p);

    // Seeds d(root)=1 for a 1×1 root and propagates into parameter grads.
    void backward(Var root);

    const Matrix& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient accumulator for an input, or nullptr when it needs none.
    Matrix* grad_target(std::size_t id);

    Var emplace(Matrix value, std::initializer_list<Var> inputs, Backward backward);
    Var emplace(Matrix value, std::span<const Var> inputs, Backward backward);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix owned;
        const Matrix* ref = nullptr;
        Matrix grad;
        Parameter* param = nullptr;
        bool requires_grad = false;
        Backward backward;
    };

    bool tracking_;
    std::vector<Node> nodes_;
};

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a (n×m) + b (1×m) broadcast over rows.
Var add_row(Var a, Var b);
Var matmul(Var a, Var b);
// a · bᵀ
Var matmul_nt(Var a, Var b);

Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
// tanh approximation
Var gelu(Var a);
// max(a, floor); gradient passes only where a > floor.
Var clamp_min(Var a, double floor);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Rows scaled to unit Euclidean norm. Throws on a zero row.
Var l2_normalize_rows(Var a);

Var slice_rows(Var a, std::size_t start, std::size_t count);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const std::size_t> rows);
Var mean_rows(Var a);

Var sum(Var a);
Var pick(Var a, std::size_t r, std::size_t c);
// Σ weights ⊙ a for a constant weight matrix.
Var weighted_sum(Var a, const Matrix& weights);

// Row i of the output is table[ids[i]] when ids[i] >= 0, otherwise
// extra[-ids[i] - 1]. Used to splice injected embeddings into a sequence.
Var splice_rows(Var table, std::span<const long> ids, Var extra);

}  // namespace ops

}  // namespace prompt_pet
