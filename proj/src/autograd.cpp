#include "prompt_pet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace prompt_pet {

Matrix& Parameter::grad_buffer() {
    if (!grad.same_shape(value)) {
        grad = Matrix(value.rows(), value.cols());
    }
    return grad;
}

void zero_grads(std::span<Parameter* const> params) {
    for (Parameter* p : params) {
        p->zero_grad();
    }
}

const Matrix& Var::value() const { return graph_->value(id_); }

const Matrix& Graph::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref != nullptr ? *n.ref : n.owned;
}

Var Graph::constant(Matrix value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Parameter& p) {
    Node n;
    n.ref = &p.value;
    if (tracking_) {
        n.param = &p;
        n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Matrix* Graph::grad_target(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) {
        return nullptr;
    }
    if (n.param != nullptr) {
        return &n.param->grad_buffer();
    }
    const Matrix& v = value(id);
    if (!n.grad.same_shape(v)) {
        n.grad = Matrix(v.rows(), v.cols());
    }
    return &n.grad;
}

Var Graph::emplace(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return emplace(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                   std::move(backward));
}

Var Graph::emplace(Matrix value, std::span<const Var> inputs, Backward backward) {
    Node n;
    n.owned = std::move(value);
    if (tracking_) {
        for (const Var& in : inputs) {
            if (in.graph() != this) {
                throw std::invalid_argument("Var belongs to a different graph");
            }
            if (nodes_[in.id()].requires_grad) {
                n.requires_grad = true;
            }
        }
        if (n.requires_grad) {
            n.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var root) {
    if (!tracking_) {
        throw std::logic_error("backward() on a graph without gradient tracking");
    }
    if (root.graph() != this || root.rows() != 1 || root.cols() != 1) {
        throw std::invalid_argument("backward() needs a 1x1 root on this graph");
    }
    if (!nodes_[root.id()].requires_grad) {
        return;
    }
    Matrix* seed = grad_target(root.id());
    (*seed)(0, 0) += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.backward || n.grad.empty()) {
            continue;
        }
        // Copy the closure handle: backward may grow nodes_' grads, not nodes_.
        Matrix g = std::move(n.grad);
        n.backward(*this, g);
    }
}

namespace ops {

namespace {

Graph& graph_of(Var a) {
    if (!a.valid()) {
        throw std::invalid_argument("invalid Var");
    }
    return *a.graph();
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string("shape mismatch in ") + op);
    }
}

template <typename F>
Matrix map(const Matrix& a, F f) {
    Matrix out(a.rows(), a.cols());
    auto src = a.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = f(src[i]);
    }
    return out;
}

}  // namespace

Var add(Var a, Var b) {
    Graph& g = graph_of(a);
    check_same_shape(a.value(), b.value(), "add");
    Matrix out = a.value();
    add_inplace(out, b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return g.emplace(std::move(out), {a, b}, [ia, ib](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) add_inplace(*t, go);
        if (Matrix* t = gr.grad_target(ib)) add_inplace(*t, go);
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a);
    check_same_shape(a.value(), b.value(), "sub");
    Matrix out = a.value();
    add_inplace(out, b.value(), -1.0);
    const std::size_t ia = a.id(), ib = b.id();
    return g.emplace(std::move(out), {a, b}, [ia, ib](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) add_inplace(*t, go);
        if (Matrix* t = gr.grad_target(ib)) add_inplace(*t, go, -1.0);
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a);
    check_same_shape(a.value(), b.value(), "mul");
    Matrix out = a.value();
    auto o = out.values();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] *= bv[i];
    }
    const std::size_t ia = a.id(), ib = b.id();
    return g.emplace(std::move(out), {a, b}, [ia, ib](Graph& gr, const Matrix& go) {
        auto gv = go.values();
        if (Matrix* t = gr.grad_target(ia)) {
            auto tv = t->values();
            auto other = gr.value(ib).values();
            for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += gv[i] * other[i];
        }
        if (Matrix* t = gr.grad_target(ib)) {
            auto tv = t->values();
            auto other = gr.value(ia).values();
            for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += gv[i] * other[i];
        }
    });
}

Var scale(Var a, double s) {
    Graph& g = graph_of(a);
    Matrix out = map(a.value(), [s](double x) { return x * s; });
    const std::size_t ia = a.id();
    return g.emplace(std::move(out), {a}, [ia, s](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) add_inplace(*t, go, s);
    });
}

Var add_row(Var a, Var b) {
    Graph& g = graph_of(a);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (bv.rows() != 1 || bv.cols() != av.cols()) {
        throw std::invalid_argument("shape mismatch in add_row");
    }
    Matrix out = av;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv(0, c);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return g.emplace(std::move(out), {a, b}, [ia, ib](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) add_inplace(*t, go);
        if (Matrix* t = gr.grad_target(ib)) {
            for (std::size_t r = 0; r < go.rows(); ++r) {
                for (std::size_t c = 0; c < go.cols(); ++c) (*t)(0, c) += go(r, c);
            }
        }
    });
}

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a);
    Matrix out = prompt_pet::matmul(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return g.emplace(std::move(out), {a, b}, [ia, ib](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) matmul_nt_acc(go, gr.value(ib), *t);
        if (Matrix* t = gr.grad_target(ib)) matmul_tn_acc(gr.value(ia), go, *t);
    });
}

Var matmul_nt(Var a, Var b) {
    Graph& g = graph_of(a);
    Matrix out = prompt_pet::matmul_nt(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return g.emplace(std::move(out), {a, b}, [ia, ib](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) matmul_acc(go, gr.value(ib), *t);
        if (Matrix* t = gr.grad_target(ib)) matmul_tn_acc(go, gr.value(ia), *t);
    });
}

namespace {

// y = f(x) with dy/dx expressed through x and y.
template <typename F, typename D>
Var unary(Var a, F f, D deriv) {
    Graph& g = graph_of(a);
    Matrix out = map(a.value(), f);
    const std::size_t ia = a.id();
    const std::size_t iy = g.size();
    return g.emplace(std::move(out), {a}, [ia, iy, deriv](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        auto tv = t->values();
        auto xv = gr.value(ia).values();
        auto yv = gr.value(iy).values();
        auto gv = go.values();
        for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += gv[i] * deriv(xv[i], yv[i]);
    });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Var relu(Var a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
    return unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
    return unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var a) {
    return unary(
        a,
        [](double x) {
            const double u = kGeluC * (x + 0.044715 * x * x * x);
            return 0.5 * x * (1.0 + std::tanh(u));
        },
        [](double x, double) {
            const double u = kGeluC * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

Var clamp_min(Var a, double floor) {
    return unary(
        a, [floor](double x) { return x > floor ? x : floor; },
        [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Var softmax_rows(Var a) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - mx);
            z += o[c];
        }
        for (double& v : o) v /= z;
    }
    const std::size_t ia = a.id();
    const std::size_t iy = g.size();
    return g.emplace(std::move(out), {a}, [ia, iy](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        const Matrix& y = gr.value(iy);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) dot += go(r, c) * y(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) (*t)(r, c) += y(r, c) * (go(r, c) - dot);
        }
    });
}

Var log_softmax_rows(Var a) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (double v : in) z += std::exp(v - mx);
        const double lz = mx + std::log(z);
        auto o = out.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lz;
    }
    const std::size_t ia = a.id();
    const std::size_t iy = g.size();
    return g.emplace(std::move(out), {a}, [ia, iy](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        const Matrix& y = gr.value(iy);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) total += go(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) {
                (*t)(r, c) += go(r, c) - std::exp(y(r, c)) * total;
            }
        }
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Graph& g = graph_of(x);
    const Matrix& xv = x.value();
    const std::size_t n = xv.rows(), d = xv.cols();
    if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
        throw std::invalid_argument("shape mismatch in layer_norm");
    }
    Matrix xhat(n, d);
    std::vector<double> inv_std(n);
    Matrix out(n, d);
    const Matrix& gv = gain.value();
    const Matrix& bv = bias.value();
    for (std::size_t r = 0; r < n; ++r) {
        auto row = xv.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat(r, c) = (row[c] - mean) * inv_std[r];
            out(r, c) = xhat(r, c) * gv(0, c) + bv(0, c);
        }
    }
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    return g.emplace(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr,
                                                                           const Matrix& go) {
            const std::size_t n = go.rows(), d = go.cols();
            if (Matrix* t = gr.grad_target(ig)) {
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) (*t)(0, c) += go(r, c) * xhat(r, c);
            }
            if (Matrix* t = gr.grad_target(ib)) {
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) (*t)(0, c) += go(r, c);
            }
            if (Matrix* t = gr.grad_target(ix)) {
                const Matrix& gain_v = gr.value(ig);
                std::vector<double> dxhat(d);
                for (std::size_t r = 0; r < n; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        dxhat[c] = go(r, c) * gain_v(0, c);
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat(r, c);
                    }
                    mean_d /= static_cast<double>(d);
                    mean_dx /= static_cast<double>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        (*t)(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
                    }
                }
            }
        });
}

Var l2_normalize_rows(Var a) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    std::vector<double> norms(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (double v : x.row(r)) s += v * v;
        norms[r] = std::sqrt(s);
        if (!(norms[r] > 0.0)) {
            throw std::domain_error("cannot normalize a zero vector");
        }
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / norms[r];
    }
    const std::size_t ia = a.id();
    const std::size_t iy = g.size();
    return g.emplace(std::move(out), {a},
                     [ia, iy, norms = std::move(norms)](Graph& gr, const Matrix& go) {
                         Matrix* t = gr.grad_target(ia);
                         if (t == nullptr) return;
                         const Matrix& y = gr.value(iy);
                         for (std::size_t r = 0; r < y.rows(); ++r) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < y.cols(); ++c) dot += go(r, c) * y(r, c);
                             for (std::size_t c = 0; c < y.cols(); ++c) {
                                 (*t)(r, c) += (go(r, c) - y(r, c) * dot) / norms[r];
                             }
                         }
                     });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    if (start + count > x.rows()) {
        throw std::out_of_range("slice_rows");
    }
    Matrix out(count, x.cols());
    for (std::size_t r = 0; r < count; ++r) {
        std::copy(x.row(start + r).begin(), x.row(start + r).end(), out.row(r).begin());
    }
    const std::size_t ia = a.id();
    return g.emplace(std::move(out), {a}, [ia, start](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        for (std::size_t r = 0; r < go.rows(); ++r)
            for (std::size_t c = 0; c < go.cols(); ++c) (*t)(start + r, c) += go(r, c);
    });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    if (start + count > x.cols()) {
        throw std::out_of_range("slice_cols");
    }
    Matrix out(x.rows(), count);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = x(r, start + c);
    const std::size_t ia = a.id();
    return g.emplace(std::move(out), {a}, [ia, start](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        for (std::size_t r = 0; r < go.rows(); ++r)
            for (std::size_t c = 0; c < go.cols(); ++c) (*t)(r, start + c) += go(r, c);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows of nothing");
    }
    Graph& g = graph_of(parts[0]);
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("shape mismatch in concat_rows");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::vector<std::size_t> ids, offsets;
    std::size_t r0 = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        std::copy(v.values().begin(), v.values().end(), out.values().begin() + r0 * cols);
        ids.push_back(p.id());
        offsets.push_back(r0);
        r0 += v.rows();
    }
    return g.emplace(std::move(out), parts,
                     [ids = std::move(ids), offsets = std::move(offsets)](Graph& gr,
                                                                          const Matrix& go) {
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                             Matrix* t = gr.grad_target(ids[k]);
                             if (t == nullptr) continue;
                             for (std::size_t r = 0; r < t->rows(); ++r)
                                 for (std::size_t c = 0; c < t->cols(); ++c)
                                     (*t)(r, c) += go(offsets[k] + r, c);
                         }
                     });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols of nothing");
    }
    Graph& g = graph_of(parts[0]);
    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("shape mismatch in concat_cols");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<std::size_t> ids, offsets;
    std::size_t c0 = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, c0 + c) = v(r, c);
        ids.push_back(p.id());
        offsets.push_back(c0);
        c0 += v.cols();
    }
    return g.emplace(std::move(out), parts,
                     [ids = std::move(ids), offsets = std::move(offsets)](Graph& gr,
                                                                          const Matrix& go) {
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                             Matrix* t = gr.grad_target(ids[k]);
                             if (t == nullptr) continue;
                             for (std::size_t r = 0; r < t->rows(); ++r)
                                 for (std::size_t c = 0; c < t->cols(); ++c)
                                     (*t)(r, c) += go(r, offsets[k] + c);
                         }
                     });
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
    Graph& g = graph_of(table);
    const Matrix& x = table.value();
    Matrix out(rows.size(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows()) throw std::out_of_range("gather_rows");
        std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
    }
    const std::size_t it = table.id();
    return g.emplace(std::move(out), {table},
                     [it, idx = std::vector<std::size_t>(rows.begin(), rows.end())](
                         Graph& gr, const Matrix& go) {
                         Matrix* t = gr.grad_target(it);
                         if (t == nullptr) return;
                         for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t c = 0; c < go.cols(); ++c)
                                 (*t)(idx[i], c) += go(i, c);
                     });
}

Var mean_rows(Var a) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    if (x.rows() == 0) throw std::invalid_argument("mean_rows of an empty matrix");
    Matrix out(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
    const double inv = 1.0 / static_cast<double>(x.rows());
    for (double& v : out.values()) v *= inv;
    const std::size_t ia = a.id();
    return g.emplace(std::move(out), {a}, [ia, inv](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        for (std::size_t r = 0; r < t->rows(); ++r)
            for (std::size_t c = 0; c < t->cols(); ++c) (*t)(r, c) += go(0, c) * inv;
    });
}

Var sum(Var a) {
    Graph& g = graph_of(a);
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::size_t ia = a.id();
    return g.emplace(Matrix(1, 1, s), {a}, [ia](Graph& gr, const Matrix& go) {
        Matrix* t = gr.grad_target(ia);
        if (t == nullptr) return;
        for (double& v : t->values()) v += go(0, 0);
    });
}

Var pick(Var a, std::size_t r, std::size_t c) {
    Graph& g = graph_of(a);
    const Matrix& x = a.value();
    if (r >= x.rows() || c >= x.cols()) throw std::out_of_range("pick");
    const std::size_t ia = a.id();
    return g.emplace(Matrix(1, 1, x(r, c)), {a}, [ia, r, c](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) (*t)(r, c) += go(0, 0);
    });
}

Var weighted_sum(Var a, const Matrix& weights) {
    Graph& g = graph_of(a);
    check_same_shape(a.value(), weights, "weighted_sum");
    double s = 0.0;
    auto xv = a.value().values();
    auto wv = weights.values();
    for (std::size_t i = 0; i < xv.size(); ++i) s += wv[i] * xv[i];
    const std::size_t ia = a.id();
    return g.emplace(Matrix(1, 1, s), {a}, [ia, weights](Graph& gr, const Matrix& go) {
        if (Matrix* t = gr.grad_target(ia)) add_inplace(*t, weights, go(0, 0));
    });
}

Var splice_rows(Var table, std::span<const long> ids, Var extra) {
    Graph& g = graph_of(table);
    const Matrix& tv = table.value();
    const std::size_t d = tv.cols();
    const Matrix* ev = extra.valid() ? &extra.value() : nullptr;
    if (ev != nullptr && ev->cols() != d) {
        throw std::invalid_argument("shape mismatch in splice_rows");
    }
    Matrix out(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::span<const double> src;
        if (ids[i] >= 0) {
            if (static_cast<std::size_t>(ids[i]) >= tv.rows()) throw std::out_of_range("splice_rows");
            src = tv.row(static_cast<std::size_t>(ids[i]));
        } else {
            const auto k = static_cast<std::size_t>(-ids[i] - 1);
            if (ev == nullptr || k >= ev->rows()) throw std::out_of_range("splice_rows extra");
            src = ev->row(k);
        }
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    const std::size_t it = table.id();
    const bool has_extra = extra.valid();
    const std::size_t ie = has_extra ? extra.id() : 0;
    std::vector<Var> inputs{table};
    if (has_extra) inputs.push_back(extra);
    return g.emplace(std::move(out), inputs,
                     [it, ie, has_extra, idx = std::vector<long>(ids.begin(), ids.end())](
                         Graph& gr, const Matrix& go) {
                         Matrix* tt = gr.grad_target(it);
                         Matrix* te = has_extra ? gr.grad_target(ie) : nullptr;
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                             Matrix* t = idx[i] >= 0 ? tt : te;
                             if (t == nullptr) continue;
                             const std::size_t row = idx[i] >= 0
                                                         ? static_cast<std::size_t>(idx[i])
                                                         : static_cast<std::size_t>(-idx[i] - 1);
                             for (std::size_t c = 0; c < go.cols(); ++c) (*t)(row, c) += go(i, c);
                         }
                     });
}

}  // namespace ops

}  // namespace prompt_pet
