#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "prompt_pet/autograd.hpp"
#include "prompt_pet/corpus.hpp"
#include "prompt_pet/templates.hpp"

namespace prompt_pet {

using Distribution = std::vector<double>;

// Whitespace vocabulary with reserved [PAD], [UNK], [MASK] at ids 0..2.
class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;
    static constexpr std::size_t kMask = 2;

    Vocabulary();

    // Specials followed by the most frequent words of `texts` (ties broken
    // lexicographically), at most `capacity` entries in total.
    static Vocabulary build(std::span<const std::string> texts, std::size_t capacity);

    std::size_t add(const std::string& token);
    std::optional<std::size_t> find(const std::string& token) const;
    std::size_t id_or_unk(const std::string& token) const;
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    std::size_t size() const { return tokens_.size(); }

    // One token per line, in id order.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct BackboneConfig {
    std::string model_id = "toy";
    std::size_t d_model = 64;
    std::size_t max_len = 64;
    std::size_t vocab_size = 2048;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ff_dim = 0;  // 0 means 4 * d_model
    std::uint64_t seed = 0;

    std::size_t ff_width() const { return ff_dim == 0 ? 4 * d_model : ff_dim; }
    void validate() const;
};

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

struct MaskOutput {
    Matrix mask_hidden;  // 1 × d_model
    Matrix mask_logits;  // 1 × vocab
};

struct MaskVars {
    Var hidden;
    Var logits;
};

class BackboneError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Masked language model over rendered prompt sequences. `soft_rows` holds one
// embedding row per entry of RenderedSequence::soft_slot_positions, injected
// positionally in place of a vocabulary embedding; it may be invalid when the
// sequence has no soft slots.
class MaskedLanguageModel {
public:
    virtual ~MaskedLanguageModel() = default;

    virtual const BackboneConfig& config() const = 0;
    virtual const Vocabulary& vocabulary() const = 0;
    virtual MaskVars forward(Graph& g, const RenderedSequence& r, Var soft_rows) = 0;
    virtual ParameterList parameters() = 0;
    virtual std::unique_ptr<MaskedLanguageModel> clone() const = 0;
    virtual void save(const std::filesystem::path& dir) const = 0;
};

// Sequence classifier used as the distilled final model and the fine-tune baseline.
class SequenceClassifier {
public:
    virtual ~SequenceClassifier() = default;

    virtual const BackboneConfig& config() const = 0;
    virtual std::size_t num_classes() const = 0;
    // 1 × C class logits.
    virtual Var forward(Graph& g, const Example& e) = 0;
    virtual ParameterList parameters() = 0;
    virtual std::unique_ptr<SequenceClassifier> clone() const = 0;
    virtual void save(const std::filesystem::path& dir) const = 0;
};

// Token ids for a rendered sequence; soft slot j is encoded as -(j + 1).
std::vector<long> sequence_ids(const Vocabulary& vocab, const RenderedSequence& r);

MaskOutput encode_masked(MaskedLanguageModel& model, const RenderedSequence& r,
                         const Matrix& soft_embeddings);
Distribution classify(SequenceClassifier& model, const Example& e);
// Words of text_a then text_b, trimmed from the tail of text_b, then text_a.
std::vector<std::string> classifier_words(const Example& e, std::size_t max_len);

std::unique_ptr<MaskedLanguageModel> make_toy_backbone(const BackboneConfig& cfg, Vocabulary vocab);
std::unique_ptr<SequenceClassifier> make_toy_classifier(const BackboneConfig& cfg, Vocabulary vocab,
                                                        std::size_t num_classes);

// "toy" builds a seeded toy model; any other id is read from a saved
// checkpoint under $PROMPT_PET_CACHE/<model_id>.
std::unique_ptr<MaskedLanguageModel> make_masked_lm(const BackboneConfig& cfg, Vocabulary vocab);
std::unique_ptr<SequenceClassifier> make_classifier(const BackboneConfig& cfg, Vocabulary vocab,
                                                    std::size_t num_classes);

std::unique_ptr<MaskedLanguageModel> load_masked_lm(const std::filesystem::path& dir);
std::unique_ptr<SequenceClassifier> load_classifier(const std::filesystem::path& dir);

std::filesystem::path model_cache_dir();

}  // namespace prompt_pet
