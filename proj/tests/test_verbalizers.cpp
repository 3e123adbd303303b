#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "prompt_pet/random.hpp"
#include "prompt_pet/verbalizers.hpp"
#include "test_util.hpp"

using namespace prompt_pet;
using testutil::grad_check;
using testutil::random_matrix;

namespace {

std::vector<double> row_vec(const Matrix& m, std::size_t r) {
    const auto s = m.row(r);
    return {s.begin(), s.end()};
}

double brute_cos(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> brute_softmax(const std::vector<double>& s) {
    std::vector<double> e(s.size());
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) z += e[i] = std::exp(s[i]);
    for (double& v : e) v /= z;
    return e;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Direct double loop over pairs, independent of the matrix formulation.
double brute_instance_loss(const Matrix& h, const std::vector<std::size_t>& y, double tau) {
    double total = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < h.rows(); ++i) {
        double z = 0.0;
        for (std::size_t k = 0; k < h.rows(); ++k)
            if (k != i) z += std::exp(brute_cos(h.row(i), h.row(k)) / tau);
        for (std::size_t j = 0; j < h.rows(); ++j) {
            if (j == i || y[i] != y[j]) continue;
            total += -(brute_cos(h.row(i), h.row(j)) / tau - std::log(z));
            ++pairs;
        }
    }
    return total / pairs;
}

double brute_proto_loss(const Matrix& h, const Matrix& p, const std::vector<std::size_t>& y, double tau) {
    double total = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i) {
        std::vector<double> s;
        for (std::size_t c = 0; c < p.rows(); ++c) s.push_back(brute_cos(h.row(i), p.row(c)) / tau);
        total += -std::log(brute_softmax(s)[y[i]]);
    }
    return total / static_cast<double>(h.rows());
}

Vocabulary vocab_with(std::initializer_list<const char*> words) {
    Vocabulary v;
    for (const char* w : words) v.add(w);
    return v;
}

MaskOutput mask_output(std::vector<double> hidden, std::vector<double> logits) {
    const std::size_t h = hidden.size(), v = logits.size();
    return {Matrix(1, h, std::move(hidden)), Matrix(1, v, std::move(logits))};
}

}  // namespace

TEST_CASE("class distribution on 10,000 random score vectors") {
    Rng rng(1);
    std::normal_distribution<double> nd(0.0, 5.0);
    std::uniform_real_distribution<double> shift(-50.0, 50.0);
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> s(2 + rng() % 9);
        for (double& v : s) v = nd(rng);
        const Distribution p = class_distribution(s);
        double sum = 0.0;
        for (double v : p) {
            REQUIRE(v > 0.0);
            REQUIRE(v < 1.0);
            sum += v;
        }
        REQUIRE(std::abs(sum - 1.0) <= 1e-9);
        std::vector<double> t = s;
        const double c = shift(rng);
        for (double& v : t) v += c;
        const Distribution q = class_distribution(t);
        for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(std::abs(p[i] - q[i]) <= 1e-9);
    }
}

TEST_CASE("class distribution worked values") {
    const std::vector<double> ln2{std::log(2.0), 0.0};
    const Distribution p = class_distribution(ln2);
    CHECK(std::abs(p[0] - 2.0 / 3.0) <= 1e-9);
    CHECK(std::abs(p[1] - 1.0 / 3.0) <= 1e-9);
    for (double v : class_distribution(std::vector<double>{0, 0, 0})) CHECK(v == doctest::Approx(1.0 / 3.0));
    for (double v : class_distribution(std::vector<double>{5, 5, 5})) CHECK(v == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(class_distribution(std::vector<double>{0.0, std::numeric_limits<double>::infinity()}),
                    VerbalizerError);
    CHECK_THROWS_AS(class_distribution(std::vector<double>{std::nan("")}), VerbalizerError);
    CHECK(is_distribution(std::vector<double>{0.25, 0.75}));
    CHECK_FALSE(is_distribution(std::vector<double>{0.5, 0.6}));
    CHECK_FALSE(is_distribution(std::vector<double>{-0.1, 1.1}));
}

TEST_CASE("manual scores read label-word logits") {
    const Vocabulary vocab = vocab_with({"World", "Sports", "Business", "Technology", "other"});
    const ManualVerbalizer v{{"World", "Sports", "Business", "Technology"}};
    const MaskOutput out = mask_output({1.0}, {0.1, 0.2, 0.3, 1.0, 2.0, 3.0, 4.0, 5.0});
    CHECK(manual_scores(v, vocab, out) == std::vector<double>{1.0, 2.0, 3.0, 4.0});
    const MaskOutput flat = mask_output({1.0}, std::vector<double>(8, 0.7));
    const auto s = manual_scores(v, vocab, flat);
    CHECK(std::all_of(s.begin(), s.end(), [](double x) { return x == 0.7; }));
    CHECK_THROWS_AS(manual_scores({{"World", "Politics"}}, vocab, out), VerbalizerError);

    ManualLabelVerbalizer mv(v, vocab);
    const Distribution p = mv.predict(out);
    CHECK(is_distribution(p));
    CHECK(argmax(p) == 3);
}

TEST_CASE("prototype prediction matches a brute-force cosine oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t c = 2 + rng() % 5;
        const std::size_t d = 2 + rng() % 16;
        const double tau = 0.1 + static_cast<double>(rng() % 100) / 50.0;
        const Prototypes p{random_matrix(c, d, rng()), tau};
        const std::vector<double> h = row_vec(random_matrix(1, d, rng()), 0);
        const Distribution got = proto_predict(p, h);
        std::vector<double> sims;
        for (std::size_t k = 0; k < c; ++k) sims.push_back(brute_cos(h, p.vectors.row(k)));
        const auto expected = brute_softmax([&] {
            std::vector<double> s = sims;
            for (double& v : s) v /= tau;
            return s;
        }());
        REQUIRE(argmax(got) == argmax(sims));
        for (std::size_t k = 0; k < c; ++k) REQUIRE(std::abs(got[k] - expected[k]) <= 1e-9);
    }
}

TEST_CASE("prototype prediction worked values") {
    const Prototypes p{Matrix(2, 2, std::vector<double>{1, 0, 0, 1}), 1.0};
    const Distribution d = proto_predict(p, std::vector<double>{1, 0});
    const double e = std::exp(1.0);
    CHECK(std::abs(d[0] - e / (e + 1)) <= 1e-12);
    CHECK(std::abs(d[1] - 1 / (e + 1)) <= 1e-12);
    CHECK(proto_predict(p, std::vector<double>{3, 0}) == d);

    const Prototypes three{Matrix(3, 3, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1}), 1.0};
    CHECK(argmax(proto_predict(three, std::vector<double>{0, 0, 1})) == 2);

    const Distribution l1 = proto_predict(p, std::vector<double>{1, 0}, ProtoNormalizer::l1);
    CHECK(l1[0] == doctest::Approx(2.0 / 3.0));
    CHECK(l1[1] == doctest::Approx(1.0 / 3.0));

    CHECK_THROWS_AS(proto_predict(p, std::vector<double>{0, 0}), VerbalizerError);
    const Prototypes zero{Matrix(2, 2, std::vector<double>{1, 0, 0, 0}), 1.0};
    CHECK_THROWS_AS(proto_predict(zero, std::vector<double>{1, 1}), VerbalizerError);
}

TEST_CASE("prototype prediction is invariant to rescaling the instance") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Prototypes p{random_matrix(4, 8, rng()), 0.5};
        std::vector<double> h = row_vec(random_matrix(1, 8, rng()), 0);
        const Distribution a = proto_predict(p, h);
        for (double& v : h) v *= 7.5;
        const Distribution b = proto_predict(p, h);
        for (std::size_t k = 0; k < 4; ++k) CHECK(b[k] == doctest::Approx(a[k]).epsilon(1e-12));
    }
}

TEST_CASE("prototype loss worked value") {
    const Matrix protos(2, 2, std::vector<double>{1, 0, 0, 1});
    const Matrix inst(4, 2, std::vector<double>{1, 0, 1, 0, 0, 1, 0, 1});
    const std::vector<std::size_t> y{0, 0, 1, 1};
    const double e = std::exp(1.0);
    const ProtoLosses l = proto_losses(inst, y, {protos, 1.0});
    CHECK(std::abs(l.prototype + std::log(e / (e + 1))) <= 1e-12);
}

TEST_CASE("losses agree with direct pairwise evaluation") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t c = 2 + rng() % 3, n = c + 1 + rng() % 6, d = 3 + rng() % 6;
        std::vector<std::size_t> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = i < c ? i : rng() % c;
        const Matrix h = random_matrix(n, d, rng());
        const Prototypes p{random_matrix(c, d, rng()), 0.7};
        const ProtoLosses l = proto_losses(h, y, p);
        CHECK(l.instance == doctest::Approx(brute_instance_loss(h, y, 0.7)).epsilon(1e-10));
        CHECK(l.prototype == doctest::Approx(brute_proto_loss(h, p.vectors, y, 0.7)).epsilon(1e-10));
        CHECK(l.instance >= 0.0);
        CHECK(l.prototype >= 0.0);
    }
}

TEST_CASE("contrastive loss gradients match central differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Parameter h("h", random_matrix(6, 5, seed));
        Parameter protos("p", random_matrix(3, 5, seed + 100));
        const std::vector<std::size_t> y{0, 1, 2, 0, 1, 1};
        Parameter* ps[] = {&h, &protos};
        const auto ins = grad_check([&](Graph& g) { return instance_loss(g.parameter(h), y, 0.5); }, ps);
        const auto pro = grad_check(
            [&](Graph& g) { return prototype_loss(g.parameter(h), g.parameter(protos), y, 0.5); }, ps);
        INFO("seed " << seed);
        CHECK(ins.max_rel_error < 1e-4);
        CHECK(pro.max_rel_error < 1e-4);
    }
}

TEST_CASE("one small step on the prototypes lowers the prototype loss") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Matrix h = random_matrix(8, 6, seed);
        const std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 0, 1};
        Parameter protos("p", random_matrix(3, 6, seed + 50, 0.02));
        auto loss = [&](Graph& g) { return prototype_loss(g.constant(h), g.parameter(protos), y, 1.0); };
        double before = 0.0;
        {
            Graph g(true);
            Var l = loss(g);
            before = l.value()(0, 0);
            protos.zero_grad();
            g.backward(l);
        }
        add_inplace(protos.value, protos.grad, -1e-4);
        Graph g(false);
        CHECK(loss(g).value()(0, 0) < before);
    }
}

TEST_CASE("instance loss is minimal at duplicated same-class instances") {
    // Class 0 sits on e0, class 1 on e1; perturb one class-0 instance within
    // the directions orthogonal to the class-1 instances.
    const Matrix base(4, 4, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0});
    const std::vector<std::size_t> y{0, 0, 1, 1};
    auto ins = [&](const Matrix& h) {
        Graph g(false);
        return instance_loss(g.constant(h), y, 1.0).value()(0, 0);
    };
    const double at_min = ins(base);
    int checked = 0;
    for (double a : {-0.5, -0.1, -0.01, 0.0, 0.01, 0.1, 0.5})
        for (double b : {-0.5, -0.1, -0.01, 0.0, 0.01, 0.1, 0.5})
            for (double c : {-0.3, 0.0, 0.3}) {
                Matrix h = base;
                h(0, 0) += c;
                h(0, 2) += a;
                h(0, 3) += b;
                CHECK(ins(h) >= at_min - 1e-12);
                ++checked;
            }
    CHECK(checked == 147);
    const std::vector<std::size_t> singles{0, 1};
    Graph g(false);
    CHECK_THROWS_AS(instance_loss(g.constant(Matrix(2, 2, 1.0)), singles, 1.0), VerbalizerError);
    CHECK_FALSE(has_positive_pair(singles));
    CHECK(has_positive_pair(y));
}

TEST_CASE("instance loss falls as same-class similarity grows") {
    auto ins = [](double spread) {
        const Matrix h(4, 2, std::vector<double>{1, spread, 1, -spread, -1, spread, -1, -spread});
        Graph g(false);
        const std::vector<std::size_t> y{0, 0, 1, 1};
        return instance_loss(g.constant(h), y, 1.0).value()(0, 0);
    };
    CHECK(ins(0.1) < ins(0.5));
    CHECK(ins(0.5) < ins(1.0));
}

TEST_CASE("prototype initialization") {
    const Prototypes a = init_prototypes(3, 16, 5), b = init_prototypes(3, 16, 5);
    CHECK(a.vectors.bitwise_equal(b.vectors));
    CHECK(a.vectors.rows() == 3);
    CHECK(a.temperature == 1.0);
    CHECK_THROWS_AS(init_prototypes(1, 16, 5), VerbalizerError);
    CHECK_THROWS_AS(init_prototypes(3, 16, 5, 0.0), VerbalizerError);
}

TEST_CASE("soft verbalizer scores") {
    const SoftVerbalizerState zero{Matrix(3, 4)};
    const auto s = soft_verbalizer_scores(zero, std::vector<double>{1, 2, 3, 4});
    for (double v : class_distribution(s)) CHECK(v == doctest::Approx(1.0 / 3.0));
    const SoftVerbalizerState aligned{Matrix(2, 3, std::vector<double>{0, 1, 0, 1, 0, 0})};
    CHECK(argmax(soft_verbalizer_scores(aligned, std::vector<double>{0.2, 3.0, -1.0})) == 0);
    CHECK(soft_verbalizer_scores(aligned, std::vector<double>{0.2, 3.0, -1.0}) == std::vector<double>{3.0, 0.2});
    CHECK_THROWS_AS(soft_verbalizer_scores(aligned, std::vector<double>{1, 2}), VerbalizerError);

    SoftVerbalizer sv = SoftVerbalizer::init(3, 5, 2);
    const Matrix hidden = random_matrix(1, 5, 9);
    ParameterList params = sv.joint_parameters();
    REQUIRE(params.size() == 1);
    const auto r = grad_check(
        [&](Graph& g) {
            MaskVars mv{g.constant(hidden), Var()};
            return ops::weighted_sum(sv.scores(g, mv), Matrix(1, 3, std::vector<double>{0.3, -1.2, 0.8}));
        },
        params);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("search fit ranks the token that fires for each class") {
    const std::size_t vocab = 12;
    Rng rng(4);
    std::vector<std::size_t> y;
    Matrix logits(30, vocab);
    for (std::size_t i = 0; i < 30; ++i) {
        const std::size_t c = i % 3;
        y.push_back(c);
        for (std::size_t t = 0; t < vocab; ++t) logits(i, t) = 0.1 * static_cast<double>(rng() % 10);
        logits(i, 5 + c) += 4.0;
    }
    const auto state = search_verbalizer_fit(logits, y, 3, 1);
    REQUIRE(state.label_word_sets.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        REQUIRE(state.label_word_sets[c].size() == 1);
        CHECK(state.label_word_sets[c][0].id == 5 + c);
        CHECK(state.label_word_sets[c][0].weight == 1.0);
    }
    const auto k3 = search_verbalizer_fit(logits, y, 3, 3);
    for (const auto& words : k3.label_word_sets) {
        CHECK(words.size() == 3);
        for (const auto& w : words) CHECK(w.weight == doctest::Approx(1.0 / 3.0));
    }
    const std::size_t excluded[] = {5};
    CHECK(search_verbalizer_fit(logits, y, 3, 1, excluded).label_word_sets[0][0].id != 5);
    const auto scores = search_scores(state, logits.row(1));
    CHECK(argmax(scores) == 1);
}

TEST_CASE("search fit is equivariant to example order") {
    Rng rng(8);
    const Matrix logits = random_matrix(20, 15, 77);
    std::vector<std::size_t> y(20);
    for (std::size_t i = 0; i < 20; ++i) y[i] = i % 4;
    const auto base = search_verbalizer_fit(logits, y, 4, 3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> perm(20);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix pl(20, 15);
        std::vector<std::size_t> py(20);
        for (std::size_t i = 0; i < 20; ++i) {
            for (std::size_t t = 0; t < 15; ++t) pl(i, t) = logits(perm[i], t);
            py[i] = y[perm[i]];
        }
        CHECK(search_verbalizer_fit(pl, py, 4, 3) == base);
    }
}

TEST_CASE("search fit errors") {
    const Matrix logits = random_matrix(4, 6, 1);
    const std::vector<std::size_t> missing_class{0, 0, 0, 0};
    CHECK_THROWS_AS(search_verbalizer_fit(logits, missing_class, 2, 1), VerbalizerError);
    const std::vector<std::size_t> y{0, 1, 0, 1};
    CHECK_THROWS_AS(search_verbalizer_fit(logits, y, 2, 0), VerbalizerError);
    CHECK_THROWS_AS(search_verbalizer_fit(logits, y, 2, 7), VerbalizerError);
    CHECK_THROWS_AS(search_verbalizer_fit(logits, std::vector<std::size_t>{0, 1}, 2, 1), VerbalizerError);
}

TEST_CASE("every verbalizer predicts valid distributions and survives save/load") {
    testutil::TempDir dir("verbalizers");
    const Vocabulary vocab = vocab_with({"alpha", "beta", "x", "y", "z"});
    const ManualVerbalizer words{{"alpha", "beta"}};
    std::vector<std::unique_ptr<Verbalizer>> all;
    all.push_back(std::make_unique<ManualLabelVerbalizer>(words, vocab));
    all.push_back(std::make_unique<PrototypicalVerbalizer>(init_prototypes(2, 6, 3, 0.5)));
    all.push_back(std::make_unique<PrototypicalVerbalizer>(init_prototypes(2, 6, 4), ProtoNormalizer::l1));
    all.push_back(std::make_unique<SoftVerbalizer>(SoftVerbalizer::init(2, 6, 5)));
    auto search = std::make_unique<SearchVerbalizer>(words, vocab, 2);
    Matrix rows = random_matrix(6, vocab.size(), 12);
    search->fit(rows, std::vector<std::size_t>{0, 1, 0, 1, 0, 1});
    REQUIRE(search->state().has_value());
    for (const auto& set : search->state()->label_word_sets)
        for (const auto& w : set) CHECK(w.id >= 3);
    all.push_back(std::move(search));
    all.push_back(std::make_unique<SearchVerbalizer>(words, vocab, 2));

    Rng rng(6);
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto path = dir.path() / std::to_string(i);
        all[i]->save(path);
        auto back = load_verbalizer(path, vocab);
        CHECK(back->kind() == all[i]->kind());
        CHECK(back->num_classes() == 2);
        for (int trial = 0; trial < 20; ++trial) {
            const MaskOutput out{random_matrix(1, 6, rng()), random_matrix(1, vocab.size(), rng())};
            const Distribution p = all[i]->predict(out);
            CHECK(is_distribution(p));
            CHECK(back->predict(out) == p);
            CHECK(all[i]->clone()->predict(out) == p);
        }
    }
    CHECK_THROWS_AS(load_verbalizer(dir.path() / "none", vocab), std::exception);
}

TEST_CASE("verbalizer kind names") {
    CHECK(parse_verbalizer_kind("proto") == VerbalizerKind::prototypical);
    CHECK(parse_verbalizer_kind("prototypical") == VerbalizerKind::prototypical);
    CHECK(parse_verbalizer_kind("search") == VerbalizerKind::search);
    CHECK(to_string(VerbalizerKind::soft) == "soft");
    CHECK_THROWS_AS(parse_verbalizer_kind("neural"), VerbalizerError);
    CHECK(parse_proto_normalizer("l1") == ProtoNormalizer::l1);
}
