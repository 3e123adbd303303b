#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "prompt_pet/harness.hpp"
#include "prompt_pet/pipeline.hpp"
#include "prompt_pet/random.hpp"
#include "prompt_pet/synthetic.hpp"
#include "prompt_pet/templates.hpp"
#include "prompt_pet/verbalizers.hpp"
#include "test_util.hpp"

using namespace prompt_pet;
namespace fs = std::filesystem;

namespace {

// Tolerances pinned for the acceptance run.
constexpr double kProbTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetSeconds = 30.0;
constexpr double kVaryThreshold = 0.90;
constexpr double kFixedThreshold = 0.80;
constexpr double kRunBudgetSeconds = 300.0;
constexpr double kOverallTol = 0.1;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) {
            pass = false;
            detail.str("");
            detail << what;
        }
    }
};

using Check = std::function<void(Outcome&)>;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Distribution random_distribution(Rng& rng, std::size_t c, bool with_zeros) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Distribution p(c);
    double s = 0.0;
    for (double& v : p) {
        v = with_zeros && u(rng) < 0.3 ? 0.0 : u(rng);
        s += v;
    }
    if (s == 0.0) p[0] = s = 1.0;
    for (double& v : p) v /= s;
    return p;
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

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void check_softmax(Outcome& o) {
    Rng rng(1);
    std::normal_distribution<double> nd(0.0, 5.0);
    std::uniform_real_distribution<double> shift(-50.0, 50.0);
    double worst = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> s(2 + rng() % 9);
        for (double& v : s) v = nd(rng);
        const Distribution p = class_distribution(s);
        double sum = 0.0;
        for (double v : p) {
            o.require(v >= 0.0 && v <= 1.0, "probability outside [0,1]");
            sum += v;
        }
        o.require(std::abs(sum - 1.0) <= kProbTol, "probabilities do not sum to 1");
        const double c = shift(rng);
        for (double& v : s) v += c;
        const Distribution q = class_distribution(s);
        for (std::size_t i = 0; i < p.size(); ++i) worst = std::max(worst, std::abs(p[i] - q[i]));
    }
    o.require(worst <= kProbTol, "shift changed the distribution");
    const Distribution ln2 = class_distribution(std::vector<double>{std::log(2.0), 0.0});
    o.require(std::abs(ln2[0] - 2.0 / 3.0) <= kProbTol && std::abs(ln2[1] - 1.0 / 3.0) <= kProbTol,
              "[ln 2, 0] did not give [2/3, 1/3]");
    if (o.pass) o.detail << "10000 vectors, max shift drift " << worst;
}

void check_kl(Outcome& o) {
    Rng rng(17);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t c = 2 + rng() % 9;
        const Distribution p = random_distribution(rng, c, true), q = random_distribution(rng, c, true);
        const double d = kl_divergence(p, q);
        o.require(d >= 0.0, "negative divergence");
        o.require(std::isfinite(d), "non-finite divergence");
        o.require(kl_divergence(p, p) == 0.0 || std::abs(kl_divergence(p, p)) <= 1e-12, "kl(p,p) != 0");
    }
    const double ln2 = kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5});
    o.require(std::abs(ln2 - std::log(2.0)) <= kProbTol, "kl([1,0],[.5,.5]) != ln 2");
    const double clamped = kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0});
    o.require(std::isfinite(clamped), "clamp left an infinite value");
    if (o.pass) o.detail << "10000 pairs, kl([1,0],[.5,.5]) = " << ln2 << ", clamped = " << clamped;
}

void check_ensemble(Outcome& o) {
    Rng rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t m = 1 + rng() % 5, n = 1 + rng() % 10, c = 2 + rng() % 4;
        std::vector<LabelerOutputs> outs(m);
        for (auto& out : outs) {
            for (std::size_t i = 0; i < n; ++i) {
                out.ids.push_back(i);
                out.distributions.push_back(random_distribution(rng, c, false));
            }
        }
        const SoftLabelSet merged = merge_outputs(outs);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t y = 0; y < c; ++y) {
                double mean = 0.0;
                for (const auto& out : outs) mean += out.distributions[i][y];
                mean /= static_cast<double>(m);
                worst = std::max(worst, std::abs(merged.entries[i].second[y] - mean));
                if (m == 1) o.require(merged.entries[i].second[y] == outs[0].distributions[i][y], "M=1 not identity");
            }
        }
    }
    o.require(worst <= kProbTol, "merged label differs from the mean");
    if (o.pass) o.detail << "500 ensembles, max deviation " << worst;
}

void check_reparam_grad(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ReparamBlock b = ReparamBlock::init(4, 6, seed);
        const ParameterList params = b.parameters();
        const Matrix probe = testutil::random_matrix(4, 6, seed + 1000);
        const auto r = testutil::grad_check(
            [&](Graph& g) { return ops::sum(ops::mul(b.forward(g), g.constant(probe))); }, params);
        worst = std::max(worst, r.max_rel_error);
    }
    const double secs = seconds_since(t0);
    o.require(worst < kGradTol, "relative error " + std::to_string(worst));
    o.require(secs < kGradBudgetSeconds, "took " + std::to_string(secs) + " s");
    if (o.pass) o.detail << "5 seeds, max rel error " << worst << ", " << secs << " s";
}

void check_proto(Outcome& o) {
    Rng rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t c = 2 + rng() % 5, d = 2 + rng() % 16;
        const double tau = 0.1 + static_cast<double>(rng() % 100) / 50.0;
        const Prototypes p{testutil::random_matrix(c, d, rng()), tau};
        const Matrix hm = testutil::random_matrix(1, d, rng());
        const std::vector<double> h(hm.row(0).begin(), hm.row(0).end());
        const Distribution got = proto_predict(p, h);
        std::vector<double> sims, expected;
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            sims.push_back(brute_cos(h, p.vectors.row(k)));
            expected.push_back(std::exp(sims.back() / tau));
            z += expected.back();
        }
        for (double& v : expected) v /= z;
        o.require(argmax(got) == argmax(sims), "argmax disagreement");
        for (std::size_t k = 0; k < c; ++k) worst = std::max(worst, std::abs(got[k] - expected[k]));
    }
    o.require(worst <= kProbTol, "probability deviation " + std::to_string(worst));

    double grad_worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Parameter h("h", testutil::random_matrix(6, 5, seed));
        Parameter protos("p", testutil::random_matrix(3, 5, seed + 100));
        const std::vector<std::size_t> y{0, 1, 2, 0, 1, 1};
        Parameter* ps[] = {&h, &protos};
        grad_worst = std::max(
            grad_worst,
            testutil::grad_check([&](Graph& g) { return instance_loss(g.parameter(h), y, 0.5); }, ps).max_rel_error);
        grad_worst = std::max(grad_worst, testutil::grad_check([&](Graph& g) {
                                              return prototype_loss(g.parameter(h), g.parameter(protos), y, 0.5);
                                          }, ps).max_rel_error);
    }
    o.require(grad_worst < kGradTol, "loss gradient error " + std::to_string(grad_worst));

    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Matrix h = testutil::random_matrix(8, 6, seed);
        const std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 0, 1};
        Parameter protos("p", testutil::random_matrix(3, 6, seed + 50, 0.02));
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
        o.require(loss(g).value()(0, 0) < before, "a small step did not lower the prototype loss");
    }
    if (o.pass) o.detail << "1000 draws, max prob deviation " << worst << ", max grad rel error " << grad_worst;
}

Vocabulary word_vocab(std::size_t words) {
    Vocabulary v;
    for (std::size_t i = 0; i < words; ++i) v.add("w" + std::to_string(i));
    return v;
}

Piece tok(std::string w) { return {Piece::Kind::token, Piece::Origin::input_a, std::move(w), 0}; }

void check_injection(Outcome& o) {
    BackboneConfig cfg;
    cfg.d_model = 64;
    cfg.max_len = 32;
    cfg.vocab_size = 1000;
    cfg.seed = 7;
    auto model = make_toy_backbone(cfg, word_vocab(200));
    const Matrix* emb = nullptr;
    for (Parameter* p : model->parameters())
        if (p->name == "encoder.tok_emb") emb = &p->value;
    o.require(emb != nullptr, "no token embedding");
    if (!o.pass) return;
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t len = 2 + rng() % 29;
        std::vector<Piece> pieces;
        for (std::size_t i = 0; i < len; ++i) pieces.push_back(tok("w" + std::to_string(rng() % 200)));
        const std::size_t mask_at = rng() % len;
        pieces[mask_at] = {Piece::Kind::mask, Piece::Origin::fixed, {}, 0};
        std::size_t slot = rng() % len;
        if (slot == mask_at) slot = (slot + 1) % len;
        const std::size_t token_id = 3 + rng() % 200;
        Matrix row(1, emb->cols());
        for (std::size_t c = 0; c < emb->cols(); ++c) row(0, c) = (*emb)(token_id, c);

        RenderedSequence textual, injected;
        textual.pieces = injected.pieces = pieces;
        textual.pieces[slot] = tok(model->vocabulary().token(token_id));
        injected.pieces[slot] = {Piece::Kind::soft, Piece::Origin::fixed, {}, 0};
        textual.recompute_positions();
        injected.recompute_positions();
        const MaskOutput a = encode_masked(*model, textual, Matrix());
        const MaskOutput b = encode_masked(*model, injected, row);
        o.require(a.mask_hidden.bitwise_equal(b.mask_hidden) && a.mask_logits.bitwise_equal(b.mask_logits),
                  "trial " + std::to_string(trial) + " differs");
    }
    if (o.pass) o.detail << "100 trials bitwise equal";
}

std::string random_words(Rng& rng, std::size_t n, const std::string& stem) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += stem + std::to_string(rng() % 50);
    }
    return out;
}

void check_templates(Outcome& o) {
    const std::vector<std::string> ag{"World", "Sports", "Business", "Technology"};
    const std::vector<std::string> nli{"contradiction", "entailment", "neutral"};
    const Example ab{0, "a", "b", std::nullopt};
    const std::vector<std::string> tc_expected{"[MASK] : a b",     "[MASK] - a b",     "a ( [MASK] ) b",
                                               "a b ( [MASK] )",   "[MASK] News: a b", "Category : [MASK] a b"};
    const std::vector<std::string> nli_expected{"\" a \" ? || [MASK] , \" b \"", "a ? || [MASK] , b",
                                                "a ? || [MASK] . b", "\" a \" ? || [MASK] . \" b \""};
    std::size_t checked = 0;
    for (const std::string name : {"agnews", "yahoo"}) {
        const auto cat = manual_catalog(name);
        o.require(cat.size() == tc_expected.size(), name + " catalog size");
        for (std::size_t i = 0; i < cat.size() && i < tc_expected.size(); ++i, ++checked)
            o.require(render(cat[i].prompt, ab, nullptr, ag, 256).display() == tc_expected[i], name + " render");
    }
    for (const std::string name : {"mnli", "rte", "cb"}) {
        const auto cat = manual_catalog(name);
        for (std::size_t i = 0; i < cat.size() && i < nli_expected.size(); ++i, ++checked)
            o.require(render(cat[i].prompt, ab, nullptr, nli, 256).display() == nli_expected[i], name + " render");
    }

    Rng rng(2024);
    const Dataset train = make_marker_dataset(10, DatasetKind::labeled, {.num_classes = 3, .seed = 5});
    for (int trial = 0; trial < 1000; ++trial) {
        const Task task = rng() % 2 ? Task::TC : Task::NLI;
        const std::size_t n = 1 + rng() % 5;
        Template t = continuous_template(task, n, "t");
        const Example* demo = nullptr;
        if (rng() % 2) {
            t = build_demo_soft_family(train, 1, n, rng())[0];
            t.task = task;
            for (const auto& e : train.examples)
                if (e.id == t.demo_source_ids[0]) demo = &e;
        }
        const Example e{0, random_words(rng, 1 + rng() % 30, "a"),
                        rng() % 2 ? std::optional<std::string>(random_words(rng, 1 + rng() % 30, "b")) : std::nullopt,
                        std::nullopt};
        const auto full = render(t, e, demo, train.class_names, 1000);
        std::size_t removable = 0;
        for (const auto& p : full.pieces) removable += p.origin != Piece::Origin::fixed;
        const std::size_t overhead = full.size() - removable;
        const std::size_t max_len = overhead + rng() % (removable + 1);
        const auto r = render(t, e, demo, train.class_names, max_len);
        std::size_t masks = 0;
        for (const auto& p : r.pieces) masks += p.kind == Piece::Kind::mask;
        o.require(masks == 1, "render without exactly one mask");
        o.require(r.soft_slot_positions.size() == t.n_soft_total(), "soft slot count changed");
        o.require(r.size() <= max_len, "render exceeds max_len");
        o.require(truncate(r, max_len) == r, "truncation not idempotent");
    }
    if (o.pass) o.detail << checked << " catalog renders, 1000 randomized renders";
}

RunConfig e2e_config(const fs::path& run_dir, Variant variant) {
    RunConfig c;
    c.run_dir = run_dir;
    c.dataset.synthetic = SyntheticSource{.num_classes = 2, .labeled_pool = 200, .unlabeled = 2000, .test = 500};
    c.variant = variant;
    c.k = 10;
    c.backbone.d_model = 64;
    c.backbone.layers = 2;
    c.backbone.max_len = 32;
    c.hyper.lr = 1e-3;
    c.hyper.epochs = 20;
    c.hyper.max_len = 32;
    c.hyper.seeds = {1, 2, 3};
    c.hyper.distill_lr = 1e-3;
    c.hyper.distill_epochs = 2;
    c.prompts.n_list = {1, 2, 3};
    return c;
}

void check_staged(Outcome& o) {
    testutil::TempDir tmp("accept_staged");
    RunConfig c = e2e_config(tmp.path(), Variant::vary_soft);
    c.dataset.synthetic->unlabeled = 60;
    c.dataset.synthetic->test = 40;
    c.hyper.epochs = 2;
    c.hyper.prototype_epochs = 20;
    const SourceData data = load_source(c.dataset);
    const Dataset train = sample_few_shot(data.pool, {FewShotSpec::Mode::per_class, 10, 1});
    const Vocabulary vocab = build_vocabulary(c, train, &*data.unlabeled);
    LabelerModel m = std::move(build_labelers(c, 1, train, vocab).front());
    auto* proto = dynamic_cast<PrototypicalVerbalizer*>(m.verbalizer.get());
    o.require(proto != nullptr, "labeler lacks a prototypical verbalizer");
    if (!o.pass) return;
    ParameterList body = m.backbone->parameters();
    const ParameterList rp = m.reparam->parameters();
    body.insert(body.end(), rp.begin(), rp.end());
    auto snapshot = [&] {
        std::vector<Matrix> out;
        for (Parameter* p : body) out.push_back(p->value);
        return out;
    };
    auto same = [&](const std::vector<Matrix>& before) {
        for (std::size_t i = 0; i < body.size(); ++i)
            if (!body[i]->value.bitwise_equal(before[i])) return false;
        return true;
    };
    const Matrix protos_before = proto->prototype_parameter().value;
    const auto body_before = snapshot();
    train_prompt_stage(m, train, c.hyper);
    o.require(proto->prototype_parameter().value.bitwise_equal(protos_before), "stage one moved the prototypes");
    o.require(!same(body_before), "stage one did not update the prompt parameters");
    const auto body_mid = snapshot();
    train_prototype_stage(m, train, c.hyper);
    o.require(same(body_mid), "stage two moved the backbone or prompt parameters");
    o.require(!proto->prototype_parameter().value.bitwise_equal(protos_before), "stage two did not update prototypes");
    if (o.pass) o.detail << body.size() << " frozen tensors bitwise unchanged in stage two, prototypes fixed in stage one";
}

void check_e2e(Outcome& o) {
    testutil::TempDir tmp("accept_e2e");
    auto timed = [&](const fs::path& dir, Variant v, double& secs) {
        const auto t0 = std::chrono::steady_clock::now();
        const RunReport r = run_pet(e2e_config(dir, v));
        secs = seconds_since(t0);
        return r;
    };
    double vary_secs = 0.0, repeat_secs = 0.0, fixed_secs = 0.0;
    const RunReport vary = timed(tmp.path() / "vary", Variant::vary_soft, vary_secs);
    const RunReport again = timed(tmp.path() / "vary_repeat", Variant::vary_soft, repeat_secs);
    const RunReport fixed = timed(tmp.path() / "fixed", Variant::fixed_soft, fixed_secs);
    o.detail.str("");
    o.detail << "vary_soft mean " << vary.mean_acc << " (";
    for (double a : vary.per_seed_acc) o.detail << a << ' ';
    o.detail << "), " << vary_secs << " s; fixed_soft mean " << fixed.mean_acc << " (";
    for (double a : fixed.per_seed_acc) o.detail << a << ' ';
    o.detail << "), " << fixed_secs << " s";
    const std::string summary = o.detail.str();
    o.require(vary.mean_acc >= kVaryThreshold, "vary_soft below threshold: " + summary);
    o.require(vary.per_seed_acc == again.per_seed_acc, "repeat run differs: " + summary);
    o.require(vary_secs <= kRunBudgetSeconds, "vary_soft over time budget: " + summary);
    o.require(fixed.mean_acc > kFixedThreshold, "fixed_soft below threshold: " + summary);
    if (o.pass) o.detail << "; repeat identical";
}

void check_aggregation(Outcome& o) {
    struct Row {
        std::string dataset;
        Task task;
        std::vector<int> ks;
        std::vector<double> values;
    };
    const std::vector<Row> table{
        {"agnews", Task::TC, {1, 5, 10, 20}, {83.5, 87.6, 88.3, 88.8}},
        {"yahoo", Task::TC, {1, 5, 10, 20}, {61.1, 67.4, 68.9, 70.7}},
        {"mnli", Task::NLI, {1, 5, 10, 20}, {36.1, 51.2, 60.4, 64.0}},
        {"cb", Task::NLI, {32}, {88.7}},
        {"rte", Task::NLI, {32}, {70.4}},
    };
    Report r;
    for (const Row& row : table)
        for (std::size_t i = 0; i < row.ks.size(); ++i)
            r.rows.push_back({row.dataset, row.task, row.ks[i], "demo_soft", row.values[i] / 100.0, 0.0, 3});
    const double mnli = 100.0 * r.dataset_mean("mnli", "demo_soft").value();
    const auto aggs = r.aggregates();
    const double overall = 100.0 * aggs.at(0).overall.value();
    o.require(std::abs(mnli - 52.925) <= 1e-9, "MNLI mean " + std::to_string(mnli));
    o.require(std::abs(overall - 73.2) <= kOverallTol, "overall mean " + std::to_string(overall));
    if (o.pass) o.detail << "MNLI mean " << mnli << ", overall " << overall;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, Check>> checks{
        {"softmax class distribution", check_softmax},
        {"KL divergence", check_kl},
        {"ensemble soft labels", check_ensemble},
        {"reparameterization gradient check", check_reparam_grad},
        {"prototypical verbalizer", check_proto},
        {"soft-slot injection equivalence", check_injection},
        {"template contracts", check_templates},
        {"staged training freezing", check_staged},
        {"end-to-end toy run", check_e2e},
        {"table aggregation", check_aggregation},
    };
    int failed = 0;
    for (const auto& [name, fn] : checks) {
        Outcome o;
        try {
            fn(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail.str("");
            o.detail << "exception: " << e.what();
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail.str() << std::endl;
    }
    std::cout << (failed ? "FAILED " : "ALL PASSED ") << checks.size() - failed << "/" << checks.size() << std::endl;
    return failed ? 1 : 0;
}
