#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "prompt_pet/autograd.hpp"
#include "prompt_pet/optim.hpp"
#include "test_util.hpp"

using namespace prompt_pet;
using testutil::grad_check;
using testutil::random_matrix;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

void close(const Matrix& a, const Matrix& b, double tol = 1e-12) {
    REQUIRE(a.same_shape(b));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) <= tol);
}

// Scalar loss Σ w ⊙ f(x) with a fixed random weight so every output entry matters.
Var weighted(Var v, std::uint64_t seed) { return ops::weighted_sum(v, random_matrix(v.rows(), v.cols(), seed)); }

}  // namespace

TEST_CASE("matrix products agree with the naive triple loop") {
    const Matrix a = random_matrix(3, 5, 1), b = random_matrix(5, 4, 2), c = random_matrix(4, 5, 3);
    close(matmul(a, b), naive_matmul(a, b));
    close(matmul_nt(a, c), naive_matmul(a, transpose(c)));
    close(matmul_tn(b, random_matrix(5, 2, 4)), naive_matmul(transpose(b), random_matrix(5, 2, 4)));
    Matrix acc = naive_matmul(a, b);
    matmul_acc(a, b, acc);
    Matrix twice = naive_matmul(a, b);
    add_inplace(twice, naive_matmul(a, b));
    close(acc, twice);
}

TEST_CASE("bitwise equality distinguishes signed zero") {
    Matrix a(1, 1, 0.0), b(1, 1, -0.0);
    CHECK(a == b);
    CHECK_FALSE(a.bitwise_equal(b));
    CHECK(a.bitwise_equal(Matrix(1, 1, 0.0)));
}

TEST_CASE("elementwise and reduction ops pass finite-difference checks") {
    Parameter x("x", random_matrix(3, 4, 10));
    Parameter y("y", random_matrix(3, 4, 11));
    Parameter row("row", random_matrix(1, 4, 12));
    Parameter* ps[] = {&x, &y, &row};
    auto check = [&](const char* name, const std::function<Var(Graph&)>& f) {
        INFO(name);
        const auto r = grad_check(f, ps);
        CHECK(r.max_rel_error < 1e-5);
    };
    check("add/sub/mul", [&](Graph& g) {
        Var a = g.parameter(x), b = g.parameter(y);
        return weighted(ops::mul(ops::add(a, b), ops::sub(a, b)), 1);
    });
    check("scale/add_row", [&](Graph& g) { return weighted(ops::add_row(ops::scale(g.parameter(x), -1.7), g.parameter(row)), 2); });
    check("tanh/sigmoid", [&](Graph& g) { return weighted(ops::mul(ops::tanh(g.parameter(x)), ops::sigmoid(g.parameter(y))), 3); });
    check("gelu", [&](Graph& g) { return weighted(ops::gelu(g.parameter(x)), 4); });
    check("softmax", [&](Graph& g) { return weighted(ops::softmax_rows(g.parameter(x)), 5); });
    check("log_softmax", [&](Graph& g) { return weighted(ops::log_softmax_rows(g.parameter(x)), 6); });
    check("layer_norm", [&](Graph& g) {
        return weighted(ops::layer_norm(g.parameter(x), g.parameter(row), ops::scale(g.parameter(row), 0.5)), 7);
    });
    check("l2_normalize", [&](Graph& g) { return weighted(ops::l2_normalize_rows(g.parameter(y)), 8); });
    check("mean_rows/sum", [&](Graph& g) { return ops::add(ops::sum(ops::mean_rows(g.parameter(x))), weighted(g.parameter(y), 9)); });
    check("pick", [&](Graph& g) { return ops::mul(ops::pick(g.parameter(x), 1, 2), ops::pick(g.parameter(y), 2, 3)); });
}

TEST_CASE("matrix ops and slicing pass finite-difference checks") {
    Parameter a("a", random_matrix(3, 4, 20));
    Parameter b("b", random_matrix(4, 2, 21));
    Parameter c("c", random_matrix(5, 4, 22));
    Parameter* ps[] = {&a, &b, &c};
    auto check = [&](const char* name, const std::function<Var(Graph&)>& f) {
        INFO(name);
        CHECK(grad_check(f, ps).max_rel_error < 1e-5);
    };
    check("matmul", [&](Graph& g) { return weighted(ops::matmul(g.parameter(a), g.parameter(b)), 1); });
    check("matmul_nt", [&](Graph& g) { return weighted(ops::matmul_nt(g.parameter(a), g.parameter(c)), 2); });
    check("slices", [&](Graph& g) {
        return ops::add(weighted(ops::slice_rows(g.parameter(c), 1, 3), 3), weighted(ops::slice_cols(g.parameter(a), 1, 2), 4));
    });
    check("concat", [&](Graph& g) {
        const Var rows[] = {g.parameter(a), g.parameter(c)};
        const Var cols[] = {g.parameter(b), ops::slice_rows(g.parameter(c), 0, 4)};
        return ops::add(weighted(ops::concat_rows(rows), 5), weighted(ops::concat_cols(cols), 6));
    });
    check("gather", [&](Graph& g) {
        const std::size_t idx[] = {4, 0, 4, 2};
        return weighted(ops::gather_rows(g.parameter(c), idx), 7);
    });
    check("splice", [&](Graph& g) {
        const long ids[] = {2, -1, 0, -3, 2};
        return weighted(ops::splice_rows(g.parameter(c), ids, g.parameter(a)), 8);
    });
}

TEST_CASE("relu and clamp_min route gradients only through the active side") {
    Parameter x("x", Matrix(1, 4, std::vector<double>{-2.0, -0.5, 0.5, 2.0}));
    Graph g(true);
    Var out = ops::add(ops::sum(ops::relu(g.parameter(x))), ops::sum(ops::clamp_min(g.parameter(x), 0.0)));
    g.backward(out);
    CHECK(x.grad(0, 0) == 0.0);
    CHECK(x.grad(0, 1) == 0.0);
    CHECK(x.grad(0, 2) == 2.0);
    CHECK(x.grad(0, 3) == 2.0);
    CHECK(out.value()(0, 0) == doctest::Approx(5.0));
}

TEST_CASE("gradients accumulate across graphs and reset with zero_grad") {
    Parameter x("x", Matrix(1, 2, 1.0));
    for (int i = 0; i < 3; ++i) {
        Graph g(true);
        g.backward(ops::sum(g.parameter(x)));
    }
    CHECK(x.grad(0, 0) == 3.0);
    x.zero_grad();
    CHECK(x.grad.empty());
}

TEST_CASE("non-tracking graphs never touch parameter gradients") {
    Parameter x("x", Matrix(2, 2, 1.0));
    Graph g(false);
    Var s = ops::sum(ops::tanh(g.parameter(x)));
    CHECK(s.value()(0, 0) == doctest::Approx(4.0 * std::tanh(1.0)));
    CHECK(x.grad.empty());
}

TEST_CASE("l2 normalization rejects a zero row") {
    Graph g(false);
    CHECK_THROWS_AS(ops::l2_normalize_rows(g.constant(Matrix(2, 3, 0.0))), std::domain_error);
}

TEST_CASE("softmax rows are distributions and shift invariant") {
    Graph g(false);
    Matrix m = random_matrix(4, 6, 30, 5.0);
    Matrix shifted = m;
    for (std::size_t r = 0; r < 4; ++r)
        for (double& v : shifted.row(r)) v += 100.0 * static_cast<double>(r + 1);
    const Matrix p = ops::softmax_rows(g.constant(m)).value();
    const Matrix q = ops::softmax_rows(g.constant(shifted)).value();
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (double v : p.row(r)) s += v;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    close(p, q, 1e-12);
}

TEST_CASE("AdamW matches a hand-computed first step") {
    Parameter p("p", Matrix(1, 2, std::vector<double>{1.0, -2.0}));
    p.grad_buffer() = Matrix(1, 2, std::vector<double>{0.5, -0.25});
    AdamW opt({.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.1});
    Parameter* ps[] = {&p};
    opt.step(ps, 0.01);
    // m̂ = g, v̂ = g², so the Adam term is g/(|g| + eps); decay is lr·wd·θ.
    auto expected = [](double theta, double grad) {
        return theta - 0.01 * 0.1 * theta - 0.01 * grad / (std::abs(grad) + 1e-8);
    };
    CHECK(p.value(0, 0) == doctest::Approx(expected(1.0, 0.5)).epsilon(1e-12));
    CHECK(p.value(0, 1) == doctest::Approx(expected(-2.0, -0.25)).epsilon(1e-12));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("AdamW rejects bad gradients without modifying anything") {
    Parameter a("a", Matrix(1, 2, 1.0)), b("b", Matrix(1, 2, 1.0));
    a.grad_buffer() = Matrix(1, 2, 0.1);
    b.grad_buffer() = Matrix(1, 2, std::numeric_limits<double>::quiet_NaN());
    Parameter* ps[] = {&a, &b};
    AdamW opt;
    CHECK_THROWS_AS(opt.step(ps, 0.1), std::domain_error);
    CHECK(a.value == Matrix(1, 2, 1.0));
    b.grad_buffer() = Matrix(2, 1, 0.1);
    CHECK_THROWS_AS(opt.step(ps, 0.1), std::invalid_argument);
    CHECK(a.value == Matrix(1, 2, 1.0));
}

TEST_CASE("AdamW treats a missing gradient as zero") {
    Parameter p("p", Matrix(1, 1, 2.0));
    Parameter* ps[] = {&p};
    AdamW opt({.weight_decay = 0.0});
    opt.step(ps, 0.1);
    CHECK(p.value(0, 0) == 2.0);
}

TEST_CASE("linear schedule decays to zero without warmup") {
    CHECK(scheduled_lr(Schedule::linear, 1e-5, 0, 10) == doctest::Approx(1e-5));
    CHECK(scheduled_lr(Schedule::linear, 1e-5, 5, 10) == doctest::Approx(5e-6));
    CHECK(scheduled_lr(Schedule::linear, 1e-5, 9, 10) == doctest::Approx(1e-6));
    CHECK(scheduled_lr(Schedule::constant, 1e-5, 9, 10) == 1e-5);
    CHECK(parse_schedule("linear") == Schedule::linear);
    CHECK_THROWS(parse_schedule("cosine"));
}
