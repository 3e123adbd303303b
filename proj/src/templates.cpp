#include "prompt_pet/templates.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <unordered_map>

#include "prompt_pet/random.hpp"

namespace prompt_pet {

using json = nlohmann::json;

namespace {

const char* kind_name(Segment::Kind k) {
    switch (k) {
        case Segment::Kind::literal: return "literal";
        case Segment::Kind::input_a: return "input_a";
        case Segment::Kind::input_b: return "input_b";
        case Segment::Kind::soft: return "soft";
        case Segment::Kind::demo: return "demo";
        case Segment::Kind::mask: return "mask";
    }
    return "?";
}

Segment::Kind parse_kind_name(const std::string& s) {
    static const std::unordered_map<std::string, Segment::Kind> kinds = {
        {"literal", Segment::Kind::literal}, {"input_a", Segment::Kind::input_a},
        {"input_b", Segment::Kind::input_b}, {"soft", Segment::Kind::soft},
        {"demo", Segment::Kind::demo},       {"mask", Segment::Kind::mask}};
    auto it = kinds.find(s);
    if (it == kinds.end()) throw TemplateError("unknown segment kind: " + s);
    return it->second;
}

}  // namespace

std::size_t Template::n_soft_total() const {
    std::size_t n = 0;
    for (const Segment& s : segments) {
        if (s.kind == Segment::Kind::soft || s.kind == Segment::Kind::demo) n += s.count;
    }
    return n;
}

std::size_t Template::soft_bank_size() const {
    std::size_t n = 0;
    for (const Segment& s : segments) {
        if (s.kind == Segment::Kind::soft || s.kind == Segment::Kind::demo) n = std::max(n, s.count);
    }
    return n;
}

bool Template::has_demo() const {
    return std::any_of(segments.begin(), segments.end(),
                       [](const Segment& s) { return s.kind == Segment::Kind::demo; });
}

void Template::validate() const {
    std::size_t masks = 0, inputs = 0, demos = 0;
    for (const Segment& s : segments) {
        switch (s.kind) {
            case Segment::Kind::mask: ++masks; break;
            case Segment::Kind::input_a:
            case Segment::Kind::input_b: ++inputs; break;
            case Segment::Kind::demo:
                ++demos;
                if (s.count == 0) throw TemplateError(id + ": demo needs at least one soft slot");
                break;
            case Segment::Kind::soft:
                if (s.count == 0) throw TemplateError(id + ": soft segment with zero slots");
                break;
            case Segment::Kind::literal:
                if (split_words(s.text).empty()) throw TemplateError(id + ": empty literal");
                break;
        }
    }
    if (masks != 1) throw TemplateError(id + ": template must contain exactly one mask");
    if (inputs == 0) throw TemplateError(id + ": template has no input segment");
    if (demos > 1) throw TemplateError(id + ": template has more than one demo segment");
}

json to_json(const Template& t) {
    json segs = json::array();
    for (const Segment& s : t.segments) {
        json js{{"kind", kind_name(s.kind)}};
        if (s.kind == Segment::Kind::literal) js["text"] = s.text;
        if (s.kind == Segment::Kind::soft || s.kind == Segment::Kind::demo) js["count"] = s.count;
        segs.push_back(std::move(js));
    }
    json j{{"id", t.id}, {"task", to_string(t.task)}, {"segments", std::move(segs)}};
    j["demo_source_ids"] = t.demo_source_ids.empty() ? json(nullptr) : json(t.demo_source_ids);
    return j;
}

Template template_from_json(const json& j) {
    Template t;
    try {
        t.id = j.at("id").get<std::string>();
        t.task = parse_task(j.at("task").get<std::string>());
        for (const json& js : j.at("segments")) {
            Segment s;
            s.kind = parse_kind_name(js.at("kind").get<std::string>());
            if (s.kind == Segment::Kind::literal) s.text = js.at("text").get<std::string>();
            if (s.kind == Segment::Kind::soft || s.kind == Segment::Kind::demo) {
                s.count = js.at("count").get<std::size_t>();
            }
            t.segments.push_back(std::move(s));
        }
        if (j.contains("demo_source_ids") && !j["demo_source_ids"].is_null()) {
            t.demo_source_ids = j["demo_source_ids"].get<std::vector<std::size_t>>();
        }
    } catch (const json::exception& e) {
        throw TemplateError(std::string("bad template json: ") + e.what());
    }
    t.validate();
    return t;
}

namespace {

using S = Segment;

std::vector<Template> topic_prompts() {
    std::vector<std::vector<Segment>> bodies = {
        {S::mask(), S::literal(":"), S::input_a(), S::input_b()},
        {S::mask(), S::literal("-"), S::input_a(), S::input_b()},
        {S::input_a(), S::literal("("), S::mask(), S::literal(")"), S::input_b()},
        {S::input_a(), S::input_b(), S::literal("("), S::mask(), S::literal(")")},
        {S::mask(), S::literal("News:"), S::input_a(), S::input_b()},
        {S::literal("Category :"), S::mask(), S::input_a(), S::input_b()},
    };
    std::vector<Template> out;
    for (std::size_t i = 0; i < bodies.size(); ++i) {
        out.push_back({"manual_p" + std::to_string(i + 1), Task::TC, std::move(bodies[i]), {}});
    }
    return out;
}

std::vector<Template> entailment_prompts(std::size_t count) {
    std::vector<std::vector<Segment>> bodies = {
        {S::literal("\""), S::input_a(), S::literal("\" ? ||"), S::mask(), S::literal(", \""),
         S::input_b(), S::literal("\"")},
        {S::input_a(), S::literal("? ||"), S::mask(), S::literal(","), S::input_b()},
        {S::input_a(), S::literal("? ||"), S::mask(), S::literal("."), S::input_b()},
        {S::literal("\""), S::input_a(), S::literal("\" ? ||"), S::mask(), S::literal(". \""),
         S::input_b(), S::literal("\"")},
    };
    std::vector<Template> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back({"manual_p" + std::to_string(i + 1), Task::NLI, std::move(bodies[i]), {}});
    }
    return out;
}

}  // namespace

std::vector<ManualVerbalizer> manual_verbalizers(const std::string& dataset_name) {
    if (dataset_name == "agnews") return {{{"World", "Sports", "Business", "Technology"}}};
    if (dataset_name == "yahoo") {
        return {{{"Society", "Science", "Health", "Education", "Computer", "Sports", "Business",
                  "Entertainment", "Relationship", "Politics"}}};
    }
    if (dataset_name == "mnli") return {{{"Wrong", "Right", "Maybe"}}, {{"No", "Yes", "Maybe"}}};
    if (dataset_name == "rte" || dataset_name == "cb") return {{{"Wrong", "Right", "Maybe"}}};
    throw TemplateError("no manual prompts for dataset: " + dataset_name);
}

std::vector<ManualPrompt> manual_catalog(const std::string& dataset_name) {
    const auto verbalizers = manual_verbalizers(dataset_name);
    std::vector<Template> prompts;
    if (dataset_name == "agnews" || dataset_name == "yahoo") {
        prompts = topic_prompts();
    } else if (dataset_name == "mnli") {
        prompts = entailment_prompts(2);
    } else {
        prompts = entailment_prompts(4);
    }
    ManualVerbalizer v = verbalizers.front();
    if (dataset_name == "rte") v.label_words.resize(2);  // two-way entailment
    std::vector<ManualPrompt> out;
    for (Template& t : prompts) out.push_back({std::move(t), v});
    return out;
}

std::vector<Segment> make_demo(const Example& e, std::size_t n_soft,
                               std::span<const std::string> class_names) {
    if (!e.label) throw TemplateError("demonstration example must be labeled");
    if (n_soft == 0) throw TemplateError("demonstration needs at least one soft slot");
    if (*e.label >= class_names.size()) throw TemplateError("demonstration label out of range");
    return {S::literal(e.joined_text()), S::soft(n_soft), S::literal(class_names[*e.label])};
}

Template continuous_template(Task task, std::size_t n_soft, std::string id) {
    Template t;
    t.id = std::move(id);
    t.task = task;
    t.segments = {S::input_a(), S::input_b()};
    if (task == Task::TC) {
        t.segments.push_back(S::literal("Category:"));
        t.segments.push_back(S::soft(n_soft));
    } else {
        t.segments.push_back(S::literal("?"));
        t.segments.push_back(S::soft(n_soft));
        t.segments.push_back(S::literal("answer :"));
    }
    t.segments.push_back(S::mask());
    t.validate();
    return t;
}

std::vector<Template> build_demo_soft_family(const Dataset& train, std::size_t count,
                                             std::size_t n_soft, std::uint64_t seed) {
    if (count == 0) throw TemplateError("demo family size must be positive");
    if (train.empty()) throw TemplateError("demo family needs a non-empty training set");
    if (n_soft == 0) throw TemplateError("demo family needs at least one soft slot");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 0xDE30));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Template> out;
    for (std::size_t k = 0; k < count; ++k) {
        const Example& demo = train.examples[order[k % order.size()]];
        Template t = continuous_template(train.task, n_soft, "demo_soft_" + std::to_string(k));
        t.segments.insert(t.segments.begin(), S::demo(n_soft));
        t.demo_source_ids = {demo.id};
        t.validate();
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<Template> build_vary_soft_family(std::span<const std::size_t> n_list, Task task) {
    if (n_list.empty()) throw TemplateError("soft-count list is empty");
    std::vector<std::size_t> seen;
    std::vector<Template> out;
    for (std::size_t n : n_list) {
        if (n == 0) throw TemplateError("soft-token counts must be positive");
        if (std::find(seen.begin(), seen.end(), n) != seen.end()) {
            throw TemplateError("duplicate soft-token count " + std::to_string(n));
        }
        seen.push_back(n);
        out.push_back(continuous_template(task, n, "vary_soft_n" + std::to_string(n)));
    }
    return out;
}

std::vector<std::size_t> RenderedSequence::soft_bank_indices() const {
    std::vector<std::size_t> out;
    out.reserve(soft_slot_positions.size());
    for (std::size_t p : soft_slot_positions) out.push_back(pieces[p].soft_index);
    return out;
}

std::string RenderedSequence::display() const {
    std::string out;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (i) out += ' ';
        const Piece& p = pieces[i];
        switch (p.kind) {
            case Piece::Kind::token: out += p.text; break;
            case Piece::Kind::soft: out += "[P" + std::to_string(p.soft_index) + "]"; break;
            case Piece::Kind::mask: out += kMaskToken; break;
        }
    }
    return out;
}

void RenderedSequence::recompute_positions() {
    soft_slot_positions.clear();
    std::size_t masks = 0;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (pieces[i].kind == Piece::Kind::mask) {
            mask_position = i;
            ++masks;
        } else if (pieces[i].kind == Piece::Kind::soft) {
            soft_slot_positions.push_back(i);
        }
    }
    if (masks != 1) throw TemplateError("rendered sequence must contain exactly one mask");
}

namespace {

void push_words(std::vector<Piece>& out, const std::string& text, Piece::Origin origin) {
    for (std::string& w : split_words(text)) {
        out.push_back({Piece::Kind::token, origin, std::move(w), 0});
    }
}

void push_soft(std::vector<Piece>& out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out.push_back({Piece::Kind::soft, Piece::Origin::fixed, {}, i});
}

}  // namespace

RenderedSequence render(const Template& t, const Example& e, const Example* demo,
                        std::span<const std::string> class_names, std::size_t max_len) {
    if (t.has_demo() && demo == nullptr) {
        throw TemplateError(t.id + ": template needs a demonstration example");
    }
    if (!t.has_demo() && demo != nullptr) {
        throw TemplateError(t.id + ": template has no demo segment");
    }
    RenderedSequence r;
    for (const Segment& s : t.segments) {
        switch (s.kind) {
            case Segment::Kind::literal: push_words(r.pieces, s.text, Piece::Origin::fixed); break;
            case Segment::Kind::input_a: push_words(r.pieces, e.text_a, Piece::Origin::input_a); break;
            case Segment::Kind::input_b:
                if (e.text_b) push_words(r.pieces, *e.text_b, Piece::Origin::input_b);
                break;
            case Segment::Kind::soft: push_soft(r.pieces, s.count); break;
            case Segment::Kind::mask:
                r.pieces.push_back({Piece::Kind::mask, Piece::Origin::fixed, {}, 0});
                break;
            case Segment::Kind::demo: {
                const auto parts = make_demo(*demo, s.count, class_names);
                push_words(r.pieces, parts[0].text, Piece::Origin::demo_text);
                push_soft(r.pieces, parts[1].count);
                push_words(r.pieces, parts[2].text, Piece::Origin::fixed);
                break;
            }
        }
    }
    r.recompute_positions();
    return truncate(r, max_len);
}

RenderedSequence truncate(const RenderedSequence& r, std::size_t max_len) {
    if (r.size() <= max_len) return r;
    std::size_t excess = r.size() - max_len;
    std::size_t removable = 0;
    for (const Piece& p : r.pieces) {
        if (p.origin != Piece::Origin::fixed) ++removable;
    }
    if (removable < excess) {
        throw TemplateError("sequence of " + std::to_string(r.size()) +
                            " pieces cannot be truncated to " + std::to_string(max_len) +
                            " without dropping prompt pieces");
    }
    std::vector<bool> drop(r.size(), false);
    for (Piece::Origin origin :
         {Piece::Origin::demo_text, Piece::Origin::input_b, Piece::Origin::input_a}) {
        for (std::size_t i = r.size(); i-- > 0 && excess > 0;) {
            if (r.pieces[i].origin == origin) {
                drop[i] = true;
                --excess;
            }
        }
    }
    RenderedSequence out;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (!drop[i]) out.pieces.push_back(r.pieces[i]);
    }
    out.recompute_positions();
    return out;
}

}  // namespace prompt_pet
