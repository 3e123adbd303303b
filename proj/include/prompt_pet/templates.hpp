#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prompt_pet/corpus.hpp"

namespace prompt_pet {

class TemplateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kMaskToken = "[MASK]";

struct Segment {
    enum class Kind { literal, input_a, input_b, soft, demo, mask };

    Kind kind = Kind::literal;
    std::string text;       // literal only
    std::size_t count = 0;  // soft: slot count; demo: soft slots inside the demonstration

    static Segment literal(std::string text) { return {Kind::literal, std::move(text), 0}; }
    static Segment input_a() { return {Kind::input_a, {}, 0}; }
    static Segment input_b() { return {Kind::input_b, {}, 0}; }
    static Segment soft(std::size_t n) { return {Kind::soft, {}, n}; }
    static Segment demo(std::size_t n_soft) { return {Kind::demo, {}, n_soft}; }
    static Segment mask() { return {Kind::mask, {}, 0}; }

    bool operator==(const Segment&) const = default;
};

struct Template {
    std::string id;
    Task task = Task::TC;
    std::vector<Segment> segments;
    std::vector<std::size_t> demo_source_ids;

    // Soft slots in a render, counting those inside the demonstration.
    std::size_t n_soft_total() const;
    // Rows of the shared soft-token bank this template addresses: every soft
    // run (input-adjacent or inside the demonstration) indexes rows 0..count-1.
    std::size_t soft_bank_size() const;
    bool has_demo() const;
    // Throws TemplateError unless: one mask, ≥1 input segment, ≤1 demo,
    // positive soft/demo counts.
    void validate() const;

    bool operator==(const Template&) const = default;
};

nlohmann::json to_json(const Template& t);
Template template_from_json(const nlohmann::json& j);

// Label words, one per class.
struct ManualVerbalizer {
    std::vector<std::string> label_words;
    bool operator==(const ManualVerbalizer&) const = default;
};

struct ManualPrompt {
    Template prompt;
    ManualVerbalizer verbalizer;
};

// Hand-written prompts for agnews, yahoo, mnli, rte and cb, each paired with
// the dataset's first verbalizer.
std::vector<ManualPrompt> manual_catalog(const std::string& dataset_name);
// All manual verbalizers defined for a dataset (two for mnli).
std::vector<ManualVerbalizer> manual_verbalizers(const std::string& dataset_name);

// [demo text][soft × n_soft][label word]
std::vector<Segment> make_demo(const Example& e, std::size_t n_soft,
                               std::span<const std::string> class_names);

// [input][anchor][soft × n][(answer :)][MASK]
Template continuous_template(Task task, std::size_t n_soft, std::string id);

std::vector<Template> build_demo_soft_family(const Dataset& train, std::size_t count,
                                             std::size_t n_soft, std::uint64_t seed);
std::vector<Template> build_vary_soft_family(std::span<const std::size_t> n_list, Task task);

struct Piece {
    enum class Kind { token, soft, mask };
    enum class Origin { fixed, demo_text, input_a, input_b };

    Kind kind = Kind::token;
    Origin origin = Origin::fixed;
    std::string text;            // token only
    std::size_t soft_index = 0;  // soft only: row in the soft-token bank

    bool operator==(const Piece&) const = default;
};

struct RenderedSequence {
    std::vector<Piece> pieces;
    std::size_t mask_position = 0;
    std::vector<std::size_t> soft_slot_positions;

    std::size_t size() const { return pieces.size(); }
    // Bank row for each entry of soft_slot_positions.
    std::vector<std::size_t> soft_bank_indices() const;
    // Space-joined pieces; soft slots print as [P<i>].
    std::string display() const;
    void recompute_positions();

    bool operator==(const RenderedSequence&) const = default;
};

// Renders `e` through `t`. `demo` must be non-null exactly when the template
// has a demo segment. The result is truncated to `max_len` pieces.
RenderedSequence render(const Template& t, const Example& e, const Example* demo,
                        std::span<const std::string> class_names, std::size_t max_len);

// Drops demonstration text, then text_b, then text_a, each from the tail,
// until the sequence fits. Soft slots, literals, label words and the mask
// are never removed.
RenderedSequence truncate(const RenderedSequence& r, std::size_t max_len);

}  // namespace prompt_pet
