#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prompt_pet/autograd.hpp"
#include "prompt_pet/backbone.hpp"
#include "prompt_pet/templates.hpp"

namespace prompt_pet {

class VerbalizerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Softmax over class scores. Throws VerbalizerError on non-finite input.
Distribution class_distribution(std::span<const double> scores);

bool is_distribution(std::span<const double> p, double tol = 1e-6);

// ---------------------------------------------------------------- manual

std::vector<std::size_t> resolve_label_words(const ManualVerbalizer& v, const Vocabulary& vocab);
std::vector<double> manual_scores(const ManualVerbalizer& v, const Vocabulary& vocab,
                                  const MaskOutput& out);

// ---------------------------------------------------------------- prototypical

struct Prototypes {
    Matrix vectors;  // C × d
    double temperature = 1.0;
};

enum class ProtoNormalizer { softmax, l1 };
ProtoNormalizer parse_proto_normalizer(const std::string& s);
std::string to_string(ProtoNormalizer n);

Prototypes init_prototypes(std::size_t num_classes, std::size_t dim, std::uint64_t seed,
                           double temperature = 1.0);

struct ProtoLosses {
    double instance = 0.0;
    double prototype = 0.0;
};

bool has_positive_pair(std::span<const std::size_t> labels);

// Instance-instance contrastive loss over unit-normalized rows:
//   -mean_{(i,j): i≠j, y_i=y_j} log softmax_{j'≠i}(cos(h_i, h_j') / temperature)_j
// Throws VerbalizerError when no same-class pair exists.
Var instance_loss(Var instances, std::span<const std::size_t> labels, double temperature);

// Instance-prototype loss:
//   -mean_i log softmax_c(cos(h_i, proto_c) / temperature)_{y_i}
Var prototype_loss(Var instances, Var prototypes, std::span<const std::size_t> labels,
                   double temperature);

ProtoLosses proto_losses(const Matrix& instances, std::span<const std::size_t> labels,
                         const Prototypes& p);

// softmax(cos(h, proto_c) / temperature), or (1 + cos_c) / sum(1 + cos) for the l1 normalizer.
Distribution proto_predict(const Prototypes& p, std::span<const double> mask_hidden,
                           ProtoNormalizer normalizer = ProtoNormalizer::softmax);

// ---------------------------------------------------------------- soft

struct SoftVerbalizerState {
    Matrix class_embeddings;  // C × d
};

std::vector<double> soft_verbalizer_scores(const SoftVerbalizerState& s,
                                           std::span<const double> mask_hidden);

// ---------------------------------------------------------------- search

struct WeightedToken {
    std::size_t id = 0;
    double weight = 0.0;
    bool operator==(const WeightedToken&) const = default;
};

struct SearchVerbalizerState {
    std::vector<std::vector<WeightedToken>> label_word_sets;
    bool operator==(const SearchVerbalizerState&) const = default;
};

// Ranks each vocabulary token for class c by its mean MASK log-probability
// over class-c rows minus its mean over all rows, keeping the top k with
// uniform weights. Ties prefer the lower token id. Tokens in `excluded`
// are never selected.
SearchVerbalizerState search_verbalizer_fit(const Matrix& mask_logit_rows,
                                            std::span<const std::size_t> labels,
                                            std::size_t num_classes, std::size_t k,
                                            std::span<const std::size_t> excluded = {});

std::vector<double> search_scores(const SearchVerbalizerState& s, std::span<const double> mask_logits);

// ---------------------------------------------------------------- labeler verbalizers

enum class VerbalizerKind { manual, prototypical, soft, search };
VerbalizerKind parse_verbalizer_kind(const std::string& s);
std::string to_string(VerbalizerKind k);

// Verbalizer state owned by one labeler model.
class Verbalizer {
public:
    virtual ~Verbalizer() = default;

    virtual VerbalizerKind kind() const = 0;
    virtual std::size_t num_classes() const = 0;
    // 1 × C class scores m(y|x) feeding the cross-entropy objective.
    virtual Var scores(Graph& g, const MaskVars& out) = 0;
    virtual Distribution predict(const MaskOutput& out) const = 0;
    // Parameters trained jointly with the prompt and backbone.
    virtual ParameterList joint_parameters() { return {}; }
    virtual std::unique_ptr<Verbalizer> clone() const = 0;
    virtual void save(const std::filesystem::path& dir) const = 0;
};

class ManualLabelVerbalizer final : public Verbalizer {
public:
    ManualLabelVerbalizer(ManualVerbalizer words, const Vocabulary& vocab);

    VerbalizerKind kind() const override { return VerbalizerKind::manual; }
    std::size_t num_classes() const override { return words_.label_words.size(); }
    Var scores(Graph& g, const MaskVars& out) override;
    Distribution predict(const MaskOutput& out) const override;
    std::unique_ptr<Verbalizer> clone() const override;
    void save(const std::filesystem::path& dir) const override;

    const ManualVerbalizer& words() const { return words_; }

private:
    ManualVerbalizer words_;
    std::vector<std::size_t> ids_;
};

class PrototypicalVerbalizer final : public Verbalizer {
public:
    PrototypicalVerbalizer(Prototypes p, ProtoNormalizer normalizer = ProtoNormalizer::softmax);

    VerbalizerKind kind() const override { return VerbalizerKind::prototypical; }
    std::size_t num_classes() const override { return prototypes_.value.rows(); }
    Var scores(Graph& g, const MaskVars& out) override;
    Distribution predict(const MaskOutput& out) const override;
    std::unique_ptr<Verbalizer> clone() const override;
    void save(const std::filesystem::path& dir) const override;

    Parameter& prototype_parameter() { return prototypes_; }
    Prototypes prototypes() const { return {prototypes_.value, temperature_}; }
    double temperature() const { return temperature_; }

private:
    Parameter prototypes_;
    double temperature_;
    ProtoNormalizer normalizer_;
};

class SoftVerbalizer final : public Verbalizer {
public:
    explicit SoftVerbalizer(SoftVerbalizerState state);
    static SoftVerbalizer init(std::size_t num_classes, std::size_t dim, std::uint64_t seed);

    VerbalizerKind kind() const override { return VerbalizerKind::soft; }
    std::size_t num_classes() const override { return embeddings_.value.rows(); }
    Var scores(Graph& g, const MaskVars& out) override;
    Distribution predict(const MaskOutput& out) const override;
    ParameterList joint_parameters() override { return {&embeddings_}; }
    std::unique_ptr<Verbalizer> clone() const override;
    void save(const std::filesystem::path& dir) const override;

private:
    Parameter embeddings_;
};

// Before fitting, scores come from the class names used as label words;
// after fitting, from the mined label-word sets.
class SearchVerbalizer final : public Verbalizer {
public:
    SearchVerbalizer(ManualVerbalizer seed_words, const Vocabulary& vocab, std::size_t k);

    VerbalizerKind kind() const override { return VerbalizerKind::search; }
    std::size_t num_classes() const override { return seed_ids_.size(); }
    Var scores(Graph& g, const MaskVars& out) override;
    Distribution predict(const MaskOutput& out) const override;
    std::unique_ptr<Verbalizer> clone() const override;
    void save(const std::filesystem::path& dir) const override;

    void fit(const Matrix& mask_logit_rows, std::span<const std::size_t> labels);
    void set_state(SearchVerbalizerState s) { state_ = std::move(s); }
    const std::optional<SearchVerbalizerState>& state() const { return state_; }
    std::size_t k() const { return k_; }

private:
    ManualVerbalizer seed_words_;
    std::vector<std::size_t> seed_ids_;
    std::size_t k_;
    std::optional<SearchVerbalizerState> state_;
};

std::unique_ptr<Verbalizer> load_verbalizer(const std::filesystem::path& dir, const Vocabulary& vocab);

}  // namespace prompt_pet
