#include "prompt_pet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>

#include "prompt_pet/checkpoint.hpp"
#include "prompt_pet/random.hpp"

namespace prompt_pet {

using json = nlohmann::json;

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary() {
    add("[PAD]");
    add("[UNK]");
    add(kMaskToken);
}

std::size_t Vocabulary::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    tokens_.push_back(token);
    index_.emplace(token, tokens_.size() - 1);
    return tokens_.size() - 1;
}

std::optional<std::size_t> Vocabulary::find(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t Vocabulary::id_or_unk(const std::string& token) const {
    return find(token).value_or(kUnk);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t capacity) {
    std::map<std::string, std::size_t> counts;
    for (const std::string& t : texts) {
        for (const std::string& w : split_words(t)) ++counts[w];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [word, n] : ranked) {
        if (v.size() >= capacity) break;
        v.add(word);
    }
    return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::string text;
    for (const std::string& t : tokens_) text += t + "\n";
    write_text_file(path, text);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw BackboneError("cannot read vocabulary " + path.string());
    Vocabulary v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        if (n < 3) {
            if (line != v.token(n)) throw BackboneError("vocabulary file has wrong special tokens");
        } else {
            v.add(line);
        }
        ++n;
    }
    return v;
}

// ---------------------------------------------------------------- config

void BackboneConfig::validate() const {
    if (max_len < 8) throw BackboneError("max_len must be at least 8");
    if (d_model < 1) throw BackboneError("d_model must be positive");
    if (model_id == "toy") {
        if (d_model > 128) throw BackboneError("toy backbone d_model must be <= 128");
        if (vocab_size > 2048 || vocab_size < 4) throw BackboneError("toy vocab_size must be in [4, 2048]");
        if (heads == 0 || d_model % heads != 0) throw BackboneError("d_model must divide into heads");
        if (layers == 0) throw BackboneError("toy backbone needs at least one layer");
    }
}

json to_json(const BackboneConfig& c) {
    return json{{"model_id", c.model_id}, {"d_model", c.d_model}, {"max_len", c.max_len},
                {"vocab_size", c.vocab_size}, {"layers", c.layers}, {"heads", c.heads},
                {"ff_dim", c.ff_dim}, {"seed", c.seed}};
}

BackboneConfig backbone_config_from_json(const json& j) {
    BackboneConfig c;
    c.model_id = j.value("model_id", c.model_id);
    c.d_model = j.value("d_model", c.d_model);
    c.max_len = j.value("max_len", c.max_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.seed = j.value("seed", c.seed);
    return c;
}

// ---------------------------------------------------------------- toy encoder

namespace {

constexpr double kInitScale = 0.02;

Parameter ones(std::string name, std::size_t n) { return Parameter(std::move(name), Matrix(1, n, 1.0)); }
Parameter zeros(std::string name, std::size_t r, std::size_t c) {
    return Parameter(std::move(name), Matrix(r, c));
}

// Pre-LayerNorm transformer encoder shared by the masked-LM and classifier heads.
class ToyEncoder {
public:
    ToyEncoder() = default;
    ToyEncoder(const BackboneConfig& cfg, std::size_t vocab) : cfg_(cfg) {
        Rng rng(mix_seed(cfg.seed, 0xE4C));
        const std::size_t d = cfg.d_model, ff = cfg.ff_width();
        tok_emb_ = Parameter("encoder.tok_emb", normal_matrix(vocab, d, kInitScale, rng));
        pos_emb_ = Parameter("encoder.pos_emb", normal_matrix(cfg.max_len, d, kInitScale, rng));
        layers_.resize(cfg.layers);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = "encoder.layer" + std::to_string(l) + ".";
            Layer& L = layers_[l];
            L.ln1_g = ones(p + "ln1.g", d);
            L.ln1_b = zeros(p + "ln1.b", 1, d);
            L.wq = Parameter(p + "wq", normal_matrix(d, d, kInitScale, rng));
            L.wk = Parameter(p + "wk", normal_matrix(d, d, kInitScale, rng));
            L.wv = Parameter(p + "wv", normal_matrix(d, d, kInitScale, rng));
            L.wo = Parameter(p + "wo", normal_matrix(d, d, kInitScale, rng));
            L.bq = zeros(p + "bq", 1, d);
            L.bk = zeros(p + "bk", 1, d);
            L.bv = zeros(p + "bv", 1, d);
            L.bo = zeros(p + "bo", 1, d);
            L.ln2_g = ones(p + "ln2.g", d);
            L.ln2_b = zeros(p + "ln2.b", 1, d);
            L.w1 = Parameter(p + "w1", normal_matrix(d, ff, kInitScale, rng));
            L.b1 = zeros(p + "b1", 1, ff);
            L.w2 = Parameter(p + "w2", normal_matrix(ff, d, kInitScale, rng));
            L.b2 = zeros(p + "b2", 1, d);
        }
        lnf_g_ = ones("encoder.lnf.g", d);
        lnf_b_ = zeros("encoder.lnf.b", 1, d);
    }

    const BackboneConfig& config() const { return cfg_; }
    Parameter& token_embeddings() { return tok_emb_; }

    // T × d final hidden states.
    Var encode(Graph& g, std::span<const long> ids, Var extra) {
        const std::size_t t = ids.size();
        if (t == 0) throw BackboneError("empty input sequence");
        if (t > cfg_.max_len) {
            throw BackboneError("sequence of length " + std::to_string(t) + " exceeds max_len " +
                                std::to_string(cfg_.max_len));
        }
        Var tok = g.parameter(tok_emb_);
        Var x = ops::splice_rows(tok, ids, extra);
        x = ops::add(x, ops::slice_rows(g.parameter(pos_emb_), 0, t));
        const std::size_t heads = cfg_.heads;
        const std::size_t hd = cfg_.d_model / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
        for (Layer& L : layers_) {
            Var h = ops::layer_norm(x, g.parameter(L.ln1_g), g.parameter(L.ln1_b));
            Var q = ops::add_row(ops::matmul(h, g.parameter(L.wq)), g.parameter(L.bq));
            Var k = ops::add_row(ops::matmul(h, g.parameter(L.wk)), g.parameter(L.bk));
            Var v = ops::add_row(ops::matmul(h, g.parameter(L.wv)), g.parameter(L.bv));
            std::vector<Var> outs;
            outs.reserve(heads);
            for (std::size_t i = 0; i < heads; ++i) {
                Var qh = ops::slice_cols(q, i * hd, hd);
                Var kh = ops::slice_cols(k, i * hd, hd);
                Var vh = ops::slice_cols(v, i * hd, hd);
                Var att = ops::softmax_rows(ops::scale(ops::matmul_nt(qh, kh), inv_sqrt));
                outs.push_back(ops::matmul(att, vh));
            }
            Var merged = ops::add_row(ops::matmul(ops::concat_cols(outs), g.parameter(L.wo)),
                                      g.parameter(L.bo));
            x = ops::add(x, merged);
            Var h2 = ops::layer_norm(x, g.parameter(L.ln2_g), g.parameter(L.ln2_b));
            Var f = ops::gelu(ops::add_row(ops::matmul(h2, g.parameter(L.w1)), g.parameter(L.b1)));
            f = ops::add_row(ops::matmul(f, g.parameter(L.w2)), g.parameter(L.b2));
            x = ops::add(x, f);
        }
        return ops::layer_norm(x, g.parameter(lnf_g_), g.parameter(lnf_b_));
    }

    void append_parameters(ParameterList& out) {
        out.push_back(&tok_emb_);
        out.push_back(&pos_emb_);
        for (Layer& L : layers_) {
            out.insert(out.end(), {&L.ln1_g, &L.ln1_b, &L.wq, &L.wk, &L.wv, &L.wo, &L.bq, &L.bk,
                                   &L.bv, &L.bo, &L.ln2_g, &L.ln2_b, &L.w1, &L.b1, &L.w2, &L.b2});
        }
        out.push_back(&lnf_g_);
        out.push_back(&lnf_b_);
    }

private:
    struct Layer {
        Parameter ln1_g, ln1_b, wq, wk, wv, wo, bq, bk, bv, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    BackboneConfig cfg_;
    Parameter tok_emb_, pos_emb_;
    std::vector<Layer> layers_;
    Parameter lnf_g_, lnf_b_;
};

void write_manifest(const std::filesystem::path& dir, const std::string& type,
                    const BackboneConfig& cfg, std::size_t num_classes) {
    json m{{"type", type}, {"config", to_json(cfg)}};
    if (num_classes) m["num_classes"] = num_classes;
    write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

class ToyMaskedLM final : public MaskedLanguageModel {
public:
    ToyMaskedLM(const BackboneConfig& cfg, Vocabulary vocab)
        : cfg_(cfg), vocab_(std::move(vocab)), encoder_(cfg, vocab_.size()) {
        const std::size_t d = cfg.d_model;
        Rng rng(mix_seed(cfg.seed, 0x31A));
        dense_w_ = Parameter("mlm.dense.w", normal_matrix(d, d, kInitScale, rng));
        dense_b_ = zeros("mlm.dense.b", 1, d);
        ln_g_ = ones("mlm.ln.g", d);
        ln_b_ = zeros("mlm.ln.b", 1, d);
        decoder_b_ = zeros("mlm.decoder.b", 1, vocab_.size());
    }

    const BackboneConfig& config() const override { return cfg_; }
    const Vocabulary& vocabulary() const override { return vocab_; }

    MaskVars forward(Graph& g, const RenderedSequence& r, Var soft_rows) override {
        const std::vector<long> ids = sequence_ids(vocab_, r);
        const std::size_t n_soft = r.soft_slot_positions.size();
        if (n_soft > 0 && (!soft_rows.valid() || soft_rows.rows() != n_soft)) {
            throw BackboneError("expected " + std::to_string(n_soft) + " soft embedding rows");
        }
        if (n_soft == 0 && soft_rows.valid() && soft_rows.rows() != 0) {
            throw BackboneError("soft embeddings supplied for a sequence without soft slots");
        }
        if (soft_rows.valid() && soft_rows.cols() != cfg_.d_model) {
            throw BackboneError("soft embedding width must equal d_model");
        }
        Var hidden = encoder_.encode(g, ids, n_soft > 0 ? soft_rows : Var());
        Var at_mask = ops::slice_rows(hidden, r.mask_position, 1);
        Var t = ops::gelu(ops::add_row(ops::matmul(at_mask, g.parameter(dense_w_)), g.parameter(dense_b_)));
        t = ops::layer_norm(t, g.parameter(ln_g_), g.parameter(ln_b_));
        Var logits = ops::add_row(ops::matmul_nt(t, g.parameter(encoder_.token_embeddings())),
                                  g.parameter(decoder_b_));
        return {at_mask, logits};
    }

    ParameterList parameters() override {
        ParameterList out;
        encoder_.append_parameters(out);
        out.insert(out.end(), {&dense_w_, &dense_b_, &ln_g_, &ln_b_, &decoder_b_});
        return out;
    }

    std::unique_ptr<MaskedLanguageModel> clone() const override {
        return std::make_unique<ToyMaskedLM>(*this);
    }

    void save(const std::filesystem::path& dir) const override {
        auto* self = const_cast<ToyMaskedLM*>(this);
        save_arrays(dir / "params.bin", collect_arrays(self->parameters()));
        vocab_.save(dir / "vocab.txt");
        write_manifest(dir, "toy_mlm", cfg_, 0);
    }

private:
    BackboneConfig cfg_;
    Vocabulary vocab_;
    ToyEncoder encoder_;
    Parameter dense_w_, dense_b_, ln_g_, ln_b_, decoder_b_;
};

class ToySequenceClassifier final : public SequenceClassifier {
public:
    ToySequenceClassifier(const BackboneConfig& cfg, Vocabulary vocab, std::size_t num_classes)
        : cfg_(cfg), vocab_(std::move(vocab)), encoder_(cfg, vocab_.size()), num_classes_(num_classes) {
        if (num_classes < 2) throw BackboneError("classifier needs at least two classes");
        const std::size_t d = cfg.d_model;
        Rng rng(mix_seed(cfg.seed, 0xC1A55 + num_classes));
        pool_w_ = Parameter("cls.pool.w", normal_matrix(d, d, kInitScale, rng));
        pool_b_ = zeros("cls.pool.b", 1, d);
        out_w_ = Parameter("cls.out.w", normal_matrix(d, num_classes, kInitScale, rng));
        out_b_ = zeros("cls.out.b", 1, num_classes);
    }

    const BackboneConfig& config() const override { return cfg_; }
    std::size_t num_classes() const override { return num_classes_; }

    Var forward(Graph& g, const Example& e) override {
        std::vector<long> ids;
        for (const std::string& w : classifier_words(e, cfg_.max_len)) {
            ids.push_back(static_cast<long>(vocab_.id_or_unk(w)));
        }
        Var hidden = encoder_.encode(g, ids, Var());
        Var pooled = ops::mean_rows(hidden);
        Var z = ops::tanh(ops::add_row(ops::matmul(pooled, g.parameter(pool_w_)), g.parameter(pool_b_)));
        return ops::add_row(ops::matmul(z, g.parameter(out_w_)), g.parameter(out_b_));
    }

    ParameterList parameters() override {
        ParameterList out;
        encoder_.append_parameters(out);
        out.insert(out.end(), {&pool_w_, &pool_b_, &out_w_, &out_b_});
        return out;
    }

    std::unique_ptr<SequenceClassifier> clone() const override {
        return std::make_unique<ToySequenceClassifier>(*this);
    }

    void save(const std::filesystem::path& dir) const override {
        auto* self = const_cast<ToySequenceClassifier*>(this);
        save_arrays(dir / "params.bin", collect_arrays(self->parameters()));
        vocab_.save(dir / "vocab.txt");
        write_manifest(dir, "toy_classifier", cfg_, num_classes_);
    }

    // Copies encoder.* arrays present in `arrays`.
    void load_encoder(const ArrayMap& arrays) {
        ParameterList enc;
        encoder_.append_parameters(enc);
        assign_arrays(enc, arrays);
    }

private:
    BackboneConfig cfg_;
    Vocabulary vocab_;
    ToyEncoder encoder_;
    std::size_t num_classes_;
    Parameter pool_w_, pool_b_, out_w_, out_b_;
};

}  // namespace

// ---------------------------------------------------------------- free functions

std::vector<long> sequence_ids(const Vocabulary& vocab, const RenderedSequence& r) {
    std::vector<long> ids;
    ids.reserve(r.size());
    long soft_ordinal = 0;
    for (const Piece& p : r.pieces) {
        switch (p.kind) {
            case Piece::Kind::token: ids.push_back(static_cast<long>(vocab.id_or_unk(p.text))); break;
            case Piece::Kind::mask: ids.push_back(static_cast<long>(Vocabulary::kMask)); break;
            case Piece::Kind::soft: ids.push_back(-(++soft_ordinal)); break;
        }
    }
    return ids;
}

MaskOutput encode_masked(MaskedLanguageModel& model, const RenderedSequence& r,
                         const Matrix& soft_embeddings) {
    if (soft_embeddings.rows() != r.soft_slot_positions.size()) {
        throw BackboneError("soft embedding rows (" + std::to_string(soft_embeddings.rows()) +
                            ") do not match soft slots (" +
                            std::to_string(r.soft_slot_positions.size()) + ")");
    }
    Graph g(false);
    Var soft = soft_embeddings.rows() > 0 ? g.constant(soft_embeddings) : Var();
    MaskVars out = model.forward(g, r, soft);
    return {out.hidden.value(), out.logits.value()};
}

std::vector<std::string> classifier_words(const Example& e, std::size_t max_len) {
    std::vector<std::string> a = split_words(e.text_a);
    std::vector<std::string> b = e.text_b ? split_words(*e.text_b) : std::vector<std::string>{};
    while (a.size() + b.size() > max_len && !b.empty()) b.pop_back();
    while (a.size() > max_len) a.pop_back();
    a.insert(a.end(), b.begin(), b.end());
    if (a.empty()) throw BackboneError("example has no words");
    return a;
}

Distribution classify(SequenceClassifier& model, const Example& e) {
    Graph g(false);
    Var probs = ops::softmax_rows(model.forward(g, e));
    const auto v = probs.value().values();
    return Distribution(v.begin(), v.end());
}

std::unique_ptr<MaskedLanguageModel> make_toy_backbone(const BackboneConfig& cfg, Vocabulary vocab) {
    if (cfg.model_id != "toy") throw BackboneError("make_toy_backbone needs model_id \"toy\"");
    cfg.validate();
    if (vocab.size() > cfg.vocab_size) {
        throw BackboneError("vocabulary of " + std::to_string(vocab.size()) +
                            " tokens exceeds vocab_size " + std::to_string(cfg.vocab_size));
    }
    return std::make_unique<ToyMaskedLM>(cfg, std::move(vocab));
}

std::unique_ptr<SequenceClassifier> make_toy_classifier(const BackboneConfig& cfg, Vocabulary vocab,
                                                        std::size_t num_classes) {
    if (cfg.model_id != "toy") throw BackboneError("make_toy_classifier needs model_id \"toy\"");
    cfg.validate();
    if (vocab.size() > cfg.vocab_size) {
        throw BackboneError("vocabulary exceeds vocab_size");
    }
    return std::make_unique<ToySequenceClassifier>(cfg, std::move(vocab), num_classes);
}

std::filesystem::path model_cache_dir() {
    if (const char* env = std::getenv("PROMPT_PET_CACHE"); env != nullptr && *env != '\0') {
        return env;
    }
    return std::filesystem::path(".prompt_pet_cache");
}

namespace {

json read_manifest(const std::filesystem::path& dir) {
    try {
        return json::parse(read_text_file(dir / "manifest.json"));
    } catch (const std::exception& e) {
        throw BackboneError("cannot read model manifest in " + dir.string() + ": " + e.what());
    }
}

std::filesystem::path cached_model(const std::string& model_id) {
    const auto dir = model_cache_dir() / model_id;
    if (!std::filesystem::exists(dir / "manifest.json")) {
        throw BackboneError("model \"" + model_id + "\" not found in cache " +
                            model_cache_dir().string() + " (set PROMPT_PET_CACHE)");
    }
    return dir;
}

}  // namespace

std::unique_ptr<MaskedLanguageModel> load_masked_lm(const std::filesystem::path& dir) {
    const json m = read_manifest(dir);
    if (m.at("type") != "toy_mlm") throw BackboneError(dir.string() + " is not a masked-LM checkpoint");
    BackboneConfig cfg = backbone_config_from_json(m.at("config"));
    cfg.model_id = "toy";
    auto model = make_toy_backbone(cfg, Vocabulary::load(dir / "vocab.txt"));
    assign_arrays(model->parameters(), load_arrays(dir / "params.bin"));
    return model;
}

std::unique_ptr<SequenceClassifier> load_classifier(const std::filesystem::path& dir) {
    const json m = read_manifest(dir);
    if (m.at("type") != "toy_classifier") {
        throw BackboneError(dir.string() + " is not a classifier checkpoint");
    }
    BackboneConfig cfg = backbone_config_from_json(m.at("config"));
    cfg.model_id = "toy";
    auto model = make_toy_classifier(cfg, Vocabulary::load(dir / "vocab.txt"),
                                     m.at("num_classes").get<std::size_t>());
    assign_arrays(model->parameters(), load_arrays(dir / "params.bin"));
    return model;
}

std::unique_ptr<MaskedLanguageModel> make_masked_lm(const BackboneConfig& cfg, Vocabulary vocab) {
    if (cfg.model_id == "toy") return make_toy_backbone(cfg, std::move(vocab));
    // Cached checkpoints carry their own vocabulary.
    return load_masked_lm(cached_model(cfg.model_id));
}

std::unique_ptr<SequenceClassifier> make_classifier(const BackboneConfig& cfg, Vocabulary vocab,
                                                    std::size_t num_classes) {
    if (cfg.model_id == "toy") return make_toy_classifier(cfg, std::move(vocab), num_classes);
    const auto dir = cached_model(cfg.model_id);
    const json m = read_manifest(dir);
    BackboneConfig base = backbone_config_from_json(m.at("config"));
    base.model_id = "toy";
    auto model = std::make_unique<ToySequenceClassifier>(base, Vocabulary::load(dir / "vocab.txt"),
                                                         num_classes);
    model->load_encoder(load_arrays(dir / "params.bin"));
    return model;
}

}  // namespace prompt_pet
