#include "prompt_pet/verbalizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "prompt_pet/checkpoint.hpp"
#include "prompt_pet/random.hpp"

namespace prompt_pet {

using json = nlohmann::json;

Distribution class_distribution(std::span<const double> scores) {
    if (scores.empty()) throw VerbalizerError("no class scores");
    for (double s : scores) {
        if (!std::isfinite(s)) throw VerbalizerError("non-finite class score");
    }
    const double mx = *std::max_element(scores.begin(), scores.end());
    Distribution p(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

bool is_distribution(std::span<const double> p, double tol) {
    if (p.empty()) return false;
    double s = 0.0;
    for (double v : p) {
        if (!std::isfinite(v) || v < 0.0) return false;
        s += v;
    }
    return std::abs(s - 1.0) <= tol;
}

// ---------------------------------------------------------------- manual

std::vector<std::size_t> resolve_label_words(const ManualVerbalizer& v, const Vocabulary& vocab) {
    std::vector<std::size_t> ids;
    for (const std::string& w : v.label_words) {
        auto id = vocab.find(w);
        if (!id) throw VerbalizerError("label word \"" + w + "\" is not in the vocabulary");
        ids.push_back(*id);
    }
    return ids;
}

std::vector<double> manual_scores(const ManualVerbalizer& v, const Vocabulary& vocab,
                                  const MaskOutput& out) {
    std::vector<double> s;
    for (std::size_t id : resolve_label_words(v, vocab)) s.push_back(out.mask_logits(0, id));
    return s;
}

// ---------------------------------------------------------------- prototypical

ProtoNormalizer parse_proto_normalizer(const std::string& s) {
    if (s == "softmax") return ProtoNormalizer::softmax;
    if (s == "l1") return ProtoNormalizer::l1;
    throw VerbalizerError("unknown prototype normalizer: " + s);
}

std::string to_string(ProtoNormalizer n) { return n == ProtoNormalizer::softmax ? "softmax" : "l1"; }

Prototypes init_prototypes(std::size_t num_classes, std::size_t dim, std::uint64_t seed,
                           double temperature) {
    if (num_classes < 2 || dim == 0) throw VerbalizerError("bad prototype shape");
    if (!(temperature > 0.0)) throw VerbalizerError("temperature must be positive");
    Rng rng(mix_seed(seed, 0x9207));
    return {normal_matrix(num_classes, dim, 0.02, rng), temperature};
}

bool has_positive_pair(std::span<const std::size_t> labels) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            if (labels[i] == labels[j]) return true;
        }
    }
    return false;
}

Var instance_loss(Var instances, std::span<const std::size_t> labels, double temperature) {
    const std::size_t n = instances.rows();
    if (labels.size() != n) throw VerbalizerError("label count does not match instances");
    if (n < 2 || !has_positive_pair(labels)) {
        throw VerbalizerError("instance loss needs at least one same-class pair");
    }
    Graph& g = *instances.graph();
    Var unit = ops::l2_normalize_rows(instances);
    Var sims = ops::scale(ops::matmul_nt(unit, unit), 1.0 / temperature);
    Matrix self_mask(n, n);
    for (std::size_t i = 0; i < n; ++i) self_mask(i, i) = -1e30;
    Var log_probs = ops::log_softmax_rows(ops::add(sims, g.constant(std::move(self_mask))));
    Matrix weights(n, n);
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && labels[i] == labels[j]) ++pairs;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && labels[i] == labels[j]) weights(i, j) = -1.0 / static_cast<double>(pairs);
    return ops::weighted_sum(log_probs, weights);
}

Var prototype_loss(Var instances, Var prototypes, std::span<const std::size_t> labels,
                   double temperature) {
    const std::size_t n = instances.rows();
    const std::size_t c = prototypes.rows();
    if (labels.size() != n || n == 0) throw VerbalizerError("label count does not match instances");
    Var sims = ops::scale(
        ops::matmul_nt(ops::l2_normalize_rows(instances), ops::l2_normalize_rows(prototypes)),
        1.0 / temperature);
    Var log_probs = ops::log_softmax_rows(sims);
    Matrix weights(n, c);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c) throw VerbalizerError("label out of range");
        weights(i, labels[i]) = -1.0 / static_cast<double>(n);
    }
    return ops::weighted_sum(log_probs, weights);
}

ProtoLosses proto_losses(const Matrix& instances, std::span<const std::size_t> labels,
                         const Prototypes& p) {
    Graph g(false);
    Var h = g.constant(instances);
    ProtoLosses out;
    out.instance = instance_loss(h, labels, p.temperature).value()(0, 0);
    out.prototype = prototype_loss(h, g.constant(p.vectors), labels, p.temperature).value()(0, 0);
    return out;
}

namespace {

std::vector<double> cosines(const Matrix& protos, std::span<const double> h) {
    if (h.size() != protos.cols()) throw VerbalizerError("instance width does not match prototypes");
    double hn = 0.0;
    for (double v : h) hn += v * v;
    hn = std::sqrt(hn);
    if (!(hn > 0.0)) throw VerbalizerError("zero instance vector");
    std::vector<double> out;
    for (std::size_t c = 0; c < protos.rows(); ++c) {
        auto row = protos.row(c);
        double pn = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < h.size(); ++i) {
            pn += row[i] * row[i];
            dot += row[i] * h[i];
        }
        pn = std::sqrt(pn);
        if (!(pn > 0.0)) throw VerbalizerError("zero prototype vector");
        out.push_back(dot / (hn * pn));
    }
    return out;
}

}  // namespace

Distribution proto_predict(const Prototypes& p, std::span<const double> mask_hidden,
                           ProtoNormalizer normalizer) {
    std::vector<double> cos = cosines(p.vectors, mask_hidden);
    if (normalizer == ProtoNormalizer::l1) {
        double z = 0.0;
        for (double& v : cos) {
            v += 1.0;
            z += v;
        }
        if (!(z > 0.0)) throw VerbalizerError("all prototype similarities are -1");
        for (double& v : cos) v /= z;
        return cos;
    }
    for (double& v : cos) v /= p.temperature;
    return class_distribution(cos);
}

// ---------------------------------------------------------------- soft

std::vector<double> soft_verbalizer_scores(const SoftVerbalizerState& s,
                                           std::span<const double> mask_hidden) {
    const Matrix& e = s.class_embeddings;
    if (mask_hidden.size() != e.cols()) throw VerbalizerError("hidden width does not match class embeddings");
    std::vector<double> out(e.rows(), 0.0);
    for (std::size_t c = 0; c < e.rows(); ++c)
        for (std::size_t i = 0; i < e.cols(); ++i) out[c] += e(c, i) * mask_hidden[i];
    return out;
}

// ---------------------------------------------------------------- search

SearchVerbalizerState search_verbalizer_fit(const Matrix& mask_logit_rows,
                                            std::span<const std::size_t> labels,
                                            std::size_t num_classes, std::size_t k,
                                            std::span<const std::size_t> excluded) {
    const std::size_t n = mask_logit_rows.rows();
    const std::size_t vocab = mask_logit_rows.cols();
    if (k == 0) throw VerbalizerError("search verbalizer k must be positive");
    if (labels.size() != n) throw VerbalizerError("label count does not match logit rows");
    if (n < num_classes) throw VerbalizerError("search verbalizer needs at least one row per class");
    std::vector<std::vector<std::size_t>> rows_of(num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= num_classes) throw VerbalizerError("label out of range");
        rows_of[labels[i]].push_back(i);
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (rows_of[c].empty()) throw VerbalizerError("class " + std::to_string(c) + " has no examples");
    }
    std::vector<bool> allowed(vocab, true);
    for (std::size_t id : excluded) {
        if (id < vocab) allowed[id] = false;
    }
    const std::size_t candidates = static_cast<std::size_t>(std::count(allowed.begin(), allowed.end(), true));
    if (candidates < k) throw VerbalizerError("fewer candidate tokens than k");

    Matrix logp(n, vocab);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = mask_logit_rows.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double lz = mx + std::log(z);
        for (std::size_t t = 0; t < vocab; ++t) logp(i, t) = row[t] - lz;
    }
    // Means are summed in sorted order so the result does not depend on row order.
    auto mean_over = [&](const std::vector<std::size_t>& rows, std::size_t t) {
        std::vector<double> vals;
        vals.reserve(rows.size());
        for (std::size_t i : rows) vals.push_back(logp(i, t));
        std::sort(vals.begin(), vals.end());
        double s = 0.0;
        for (double v : vals) s += v;
        return s / static_cast<double>(rows.size());
    };
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::vector<double> overall(vocab);
    for (std::size_t t = 0; t < vocab; ++t) overall[t] = mean_over(all, t);

    SearchVerbalizerState state;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t t = 0; t < vocab; ++t) {
            if (allowed[t]) ranked.emplace_back(mean_over(rows_of[c], t) - overall[t], t);
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        std::vector<WeightedToken> words;
        for (std::size_t i = 0; i < k; ++i) {
            words.push_back({ranked[i].second, 1.0 / static_cast<double>(k)});
        }
        state.label_word_sets.push_back(std::move(words));
    }
    return state;
}

std::vector<double> search_scores(const SearchVerbalizerState& s, std::span<const double> mask_logits) {
    std::vector<double> out;
    for (const auto& words : s.label_word_sets) {
        double v = 0.0;
        for (const WeightedToken& w : words) {
            if (w.id >= mask_logits.size()) throw VerbalizerError("label word id out of range");
            v += w.weight * mask_logits[w.id];
        }
        out.push_back(v);
    }
    return out;
}

// ---------------------------------------------------------------- labeler verbalizers

VerbalizerKind parse_verbalizer_kind(const std::string& s) {
    if (s == "manual") return VerbalizerKind::manual;
    if (s == "proto" || s == "prototypical") return VerbalizerKind::prototypical;
    if (s == "soft") return VerbalizerKind::soft;
    if (s == "search") return VerbalizerKind::search;
    throw VerbalizerError("unknown verbalizer: " + s);
}

std::string to_string(VerbalizerKind k) {
    switch (k) {
        case VerbalizerKind::manual: return "manual";
        case VerbalizerKind::prototypical: return "proto";
        case VerbalizerKind::soft: return "soft";
        case VerbalizerKind::search: return "search";
    }
    return "?";
}

namespace {

Var picked_logits(Var logits, std::span<const std::size_t> ids) {
    std::vector<Var> cols;
    cols.reserve(ids.size());
    for (std::size_t id : ids) cols.push_back(ops::pick(logits, 0, id));
    return ops::concat_cols(cols);
}


void write_verbalizer_json(const std::filesystem::path& dir, const json& j) {
    write_text_file(dir / "verbalizer.json", j.dump(2) + "\n");
}

}  // namespace

ManualLabelVerbalizer::ManualLabelVerbalizer(ManualVerbalizer words, const Vocabulary& vocab)
    : words_(std::move(words)), ids_(resolve_label_words(words_, vocab)) {}

Var ManualLabelVerbalizer::scores(Graph&, const MaskVars& out) { return picked_logits(out.logits, ids_); }

Distribution ManualLabelVerbalizer::predict(const MaskOutput& out) const {
    std::vector<double> s;
    for (std::size_t id : ids_) s.push_back(out.mask_logits(0, id));
    return class_distribution(s);
}

std::unique_ptr<Verbalizer> ManualLabelVerbalizer::clone() const {
    return std::make_unique<ManualLabelVerbalizer>(*this);
}

void ManualLabelVerbalizer::save(const std::filesystem::path& dir) const {
    write_verbalizer_json(dir, {{"type", "manual"}, {"label_words", words_.label_words}});
}

PrototypicalVerbalizer::PrototypicalVerbalizer(Prototypes p, ProtoNormalizer normalizer)
    : prototypes_("verbalizer.prototypes", std::move(p.vectors)),
      temperature_(p.temperature),
      normalizer_(normalizer) {
    if (!(temperature_ > 0.0)) throw VerbalizerError("temperature must be positive");
}

Var PrototypicalVerbalizer::scores(Graph& g, const MaskVars& out) {
    Var protos = ops::l2_normalize_rows(g.parameter(prototypes_));
    return ops::scale(ops::matmul_nt(ops::l2_normalize_rows(out.hidden), protos), 1.0 / temperature_);
}

Distribution PrototypicalVerbalizer::predict(const MaskOutput& out) const {
    return proto_predict(prototypes(), out.mask_hidden.values(), normalizer_);
}

std::unique_ptr<Verbalizer> PrototypicalVerbalizer::clone() const {
    return std::make_unique<PrototypicalVerbalizer>(*this);
}

void PrototypicalVerbalizer::save(const std::filesystem::path& dir) const {
    write_verbalizer_json(dir, {{"type", "proto"},
                                {"temperature", temperature_},
                                {"normalizer", to_string(normalizer_)}});
    save_arrays(dir / "arrays.bin", {{"prototypes", prototypes_.value}});
}

SoftVerbalizer::SoftVerbalizer(SoftVerbalizerState state)
    : embeddings_("verbalizer.class_embeddings", std::move(state.class_embeddings)) {}

SoftVerbalizer SoftVerbalizer::init(std::size_t num_classes, std::size_t dim, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x50F7));
    return SoftVerbalizer({normal_matrix(num_classes, dim, 0.02, rng)});
}

Var SoftVerbalizer::scores(Graph& g, const MaskVars& out) {
    return ops::matmul_nt(out.hidden, g.parameter(embeddings_));
}

Distribution SoftVerbalizer::predict(const MaskOutput& out) const {
    return class_distribution(soft_verbalizer_scores({embeddings_.value}, out.mask_hidden.values()));
}

std::unique_ptr<Verbalizer> SoftVerbalizer::clone() const { return std::make_unique<SoftVerbalizer>(*this); }

void SoftVerbalizer::save(const std::filesystem::path& dir) const {
    write_verbalizer_json(dir, {{"type", "soft"}});
    save_arrays(dir / "arrays.bin", {{"class_embeddings", embeddings_.value}});
}

SearchVerbalizer::SearchVerbalizer(ManualVerbalizer seed_words, const Vocabulary& vocab, std::size_t k)
    : seed_words_(std::move(seed_words)), seed_ids_(resolve_label_words(seed_words_, vocab)), k_(k) {
    if (k == 0) throw VerbalizerError("search verbalizer k must be positive");
}

Var SearchVerbalizer::scores(Graph& g, const MaskVars& out) {
    if (!state_) return picked_logits(out.logits, seed_ids_);
    Matrix weights(out.logits.cols(), state_->label_word_sets.size());
    for (std::size_t c = 0; c < state_->label_word_sets.size(); ++c)
        for (const WeightedToken& w : state_->label_word_sets[c]) weights(w.id, c) += w.weight;
    return ops::matmul(out.logits, g.constant(std::move(weights)));
}

Distribution SearchVerbalizer::predict(const MaskOutput& out) const {
    if (!state_) {
        std::vector<double> s;
        for (std::size_t id : seed_ids_) s.push_back(out.mask_logits(0, id));
        return class_distribution(s);
    }
    return class_distribution(search_scores(*state_, out.mask_logits.values()));
}

void SearchVerbalizer::fit(const Matrix& mask_logit_rows, std::span<const std::size_t> labels) {
    const std::size_t specials[] = {Vocabulary::kPad, Vocabulary::kUnk, Vocabulary::kMask};
    state_ = search_verbalizer_fit(mask_logit_rows, labels, seed_ids_.size(), k_, specials);
}

std::unique_ptr<Verbalizer> SearchVerbalizer::clone() const {
    return std::make_unique<SearchVerbalizer>(*this);
}

void SearchVerbalizer::save(const std::filesystem::path& dir) const {
    json j{{"type", "search"}, {"k", k_}, {"seed_words", seed_words_.label_words}};
    if (state_) {
        json sets = json::array();
        for (const auto& words : state_->label_word_sets) {
            json ws = json::array();
            for (const WeightedToken& w : words) ws.push_back({{"id", w.id}, {"weight", w.weight}});
            sets.push_back(ws);
        }
        j["label_word_sets"] = sets;
    }
    write_verbalizer_json(dir, j);
}

std::unique_ptr<Verbalizer> load_verbalizer(const std::filesystem::path& dir, const Vocabulary& vocab) {
    const json j = json::parse(read_text_file(dir / "verbalizer.json"));
    const std::string type = j.at("type").get<std::string>();
    if (type == "manual") {
        return std::make_unique<ManualLabelVerbalizer>(
            ManualVerbalizer{j.at("label_words").get<std::vector<std::string>>()}, vocab);
    }
    if (type == "proto") {
        ArrayMap a = load_arrays(dir / "arrays.bin");
        return std::make_unique<PrototypicalVerbalizer>(
            Prototypes{a.at("prototypes"), j.at("temperature").get<double>()},
            parse_proto_normalizer(j.at("normalizer").get<std::string>()));
    }
    if (type == "soft") {
        ArrayMap a = load_arrays(dir / "arrays.bin");
        return std::make_unique<SoftVerbalizer>(SoftVerbalizerState{a.at("class_embeddings")});
    }
    if (type == "search") {
        auto v = std::make_unique<SearchVerbalizer>(
            ManualVerbalizer{j.at("seed_words").get<std::vector<std::string>>()}, vocab,
            j.at("k").get<std::size_t>());
        if (j.contains("label_word_sets")) {
            SearchVerbalizerState s;
            for (const json& ws : j["label_word_sets"]) {
                std::vector<WeightedToken> words;
                for (const json& w : ws) words.push_back({w.at("id").get<std::size_t>(), w.at("weight").get<double>()});
                s.label_word_sets.push_back(std::move(words));
            }
            v->set_state(std::move(s));
        }
        return v;
    }
    throw VerbalizerError("unknown verbalizer type in " + dir.string());
}

}  // namespace prompt_pet
