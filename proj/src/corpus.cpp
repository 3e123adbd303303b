#include "prompt_pet/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "prompt_pet/checkpoint.hpp"
#include "prompt_pet/random.hpp"

namespace prompt_pet {

using json = nlohmann::json;

Task parse_task(const std::string& s) {
    if (s == "TC") return Task::TC;
    if (s == "NLI") return Task::NLI;
    throw CorpusError("unknown task: " + s);
}

std::string to_string(Task t) { return t == Task::TC ? "TC" : "NLI"; }

DatasetKind parse_kind(const std::string& s) {
    if (s == "labeled") return DatasetKind::labeled;
    if (s == "unlabeled") return DatasetKind::unlabeled;
    if (s == "test") return DatasetKind::test;
    throw CorpusError("unknown dataset kind: " + s);
}

std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::labeled: return "labeled";
        case DatasetKind::unlabeled: return "unlabeled";
        case DatasetKind::test: return "test";
    }
    return "?";
}

FewShotSpec::Mode parse_few_shot_mode(const std::string& s) {
    if (s == "per_class") return FewShotSpec::Mode::per_class;
    if (s == "total") return FewShotSpec::Mode::total;
    throw CorpusError("unknown few-shot mode: " + s);
}

std::string to_string(FewShotSpec::Mode m) {
    return m == FewShotSpec::Mode::per_class ? "per_class" : "total";
}

std::string Example::joined_text() const {
    if (text_b && !text_b->empty()) return text_a + " " + *text_b;
    return text_a;
}

void Dataset::validate() const {
    if (class_names.size() < 2) {
        throw CorpusError("dataset " + name + " needs at least two classes");
    }
    std::unordered_set<std::string> seen(class_names.begin(), class_names.end());
    if (seen.size() != class_names.size()) {
        throw CorpusError("dataset " + name + " has duplicate class names");
    }
    std::unordered_set<std::size_t> ids;
    for (const Example& e : examples) {
        if (e.text_a.empty()) {
            throw CorpusError("example " + std::to_string(e.id) + " has empty text_a");
        }
        if (!ids.insert(e.id).second) {
            throw CorpusError("duplicate example id " + std::to_string(e.id));
        }
        if (kind == DatasetKind::unlabeled && e.label) {
            throw CorpusError("unlabeled dataset contains a label (id " + std::to_string(e.id) + ")");
        }
        if (kind != DatasetKind::unlabeled) {
            if (!e.label) {
                throw CorpusError("example " + std::to_string(e.id) + " is missing its label");
            }
            if (*e.label >= class_names.size()) {
                throw CorpusError("example " + std::to_string(e.id) + " has label out of range");
            }
        }
    }
}

Dataset Dataset::like(DatasetKind k) const {
    Dataset d;
    d.name = name;
    d.task = task;
    d.class_names = class_names;
    d.kind = k;
    return d;
}

std::size_t Dataset::class_index(const std::string& label) const {
    auto it = std::find(class_names.begin(), class_names.end(), label);
    if (it == class_names.end()) {
        throw CorpusError("unknown label \"" + label + "\"");
    }
    return static_cast<std::size_t>(it - class_names.begin());
}

std::optional<DatasetStats> known_dataset_stats(const std::string& name) {
    if (name == "agnews") return DatasetStats{Task::TC, 4, 40000, 7600};
    if (name == "yahoo") return DatasetStats{Task::TC, 10, 100000, 60000};
    if (name == "cb") return DatasetStats{Task::NLI, 3, 30000, 56};
    if (name == "rte") return DatasetStats{Task::NLI, 2, 20000, 277};
    if (name == "mnli") return DatasetStats{Task::NLI, 3, 30000, 9815};
    return std::nullopt;
}

DatasetSchema load_metadata(const std::filesystem::path& path, DatasetKind kind) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw CorpusError(path.string() + ": " + e.what());
    }
    DatasetSchema s;
    try {
        s.name = j.at("name").get<std::string>();
        s.task = parse_task(j.at("task").get<std::string>());
        s.class_names = j.at("class_names").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw CorpusError(path.string() + ": " + e.what());
    }
    s.kind = kind;
    return s;
}

void write_metadata(const std::filesystem::path& path, const Dataset& d) {
    json j{{"name", d.name}, {"task", to_string(d.task)}, {"class_names", d.class_names}};
    write_text_file(path, j.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& path, const DatasetSchema& schema) {
    std::ifstream is(path);
    if (!is) throw CorpusError("cannot open " + path.string());
    Dataset d;
    d.name = schema.name;
    d.task = schema.task;
    d.class_names = schema.class_names;
    d.kind = schema.kind;
    std::string line;
    std::size_t line_no = 0;
    std::size_t record = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ": line " + std::to_string(line_no) + ": ";
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw CorpusError(where + "malformed record (" + e.what() + ")");
        }
        if (!j.is_object() || !j.contains("text_a") || !j["text_a"].is_string()) {
            throw CorpusError(where + "malformed record (missing text_a)");
        }
        Example e;
        e.id = record;
        if (j.contains("id")) {
            if (!j["id"].is_number_unsigned()) throw CorpusError(where + "malformed record (bad id)");
            e.id = j["id"].get<std::size_t>();
        }
        e.text_a = j["text_a"].get<std::string>();
        if (e.text_a.empty()) throw CorpusError(where + "malformed record (empty text_a)");
        if (j.contains("text_b") && !j["text_b"].is_null()) {
            if (!j["text_b"].is_string()) throw CorpusError(where + "malformed record (bad text_b)");
            e.text_b = j["text_b"].get<std::string>();
        }
        const bool has_label = j.contains("label") && !j["label"].is_null();
        if (schema.kind == DatasetKind::unlabeled) {
            if (has_label) throw CorpusError(where + "label present in an unlabeled set");
        } else {
            if (!has_label || !j["label"].is_string()) {
                throw CorpusError(where + "malformed record (missing label)");
            }
            const std::string label = j["label"].get<std::string>();
            try {
                e.label = d.class_index(label);
            } catch (const CorpusError& err) {
                throw CorpusError(where + err.what());
            }
        }
        d.examples.push_back(std::move(e));
        ++record;
    }
    if (d.examples.empty()) throw CorpusError(path.string() + ": empty file");
    d.validate();
    return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& d) {
    std::ostringstream os;
    for (const Example& e : d.examples) {
        json j;
        j["id"] = e.id;
        j["text_a"] = e.text_a;
        j["text_b"] = e.text_b ? json(*e.text_b) : json(nullptr);
        j["label"] = e.label ? json(d.class_names.at(*e.label)) : json(nullptr);
        os << j.dump() << "\n";
    }
    write_text_file(path, os.str());
}

namespace {

std::vector<std::size_t> take_sorted(std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

Dataset sample_few_shot(const Dataset& d, const FewShotSpec& spec) {
    if (spec.k <= 0) throw CorpusError("few-shot k must be positive");
    if (d.kind == DatasetKind::unlabeled) throw CorpusError("few-shot sampling needs labels");
    const std::size_t c = d.num_classes();
    std::vector<std::vector<std::size_t>> by_class(c);
    for (std::size_t i = 0; i < d.examples.size(); ++i) by_class[*d.examples[i].label].push_back(i);

    std::vector<std::size_t> quota(c, 0);
    const auto k = static_cast<std::size_t>(spec.k);
    if (spec.mode == FewShotSpec::Mode::per_class) {
        std::fill(quota.begin(), quota.end(), k);
    } else {
        for (std::size_t i = 0; i < c; ++i) quota[i] = k / c + (i < k % c ? 1 : 0);
    }

    Rng rng(mix_seed(spec.seed, 0xF5));
    std::vector<std::size_t> chosen;
    for (std::size_t cls = 0; cls < c; ++cls) {
        auto& pool = by_class[cls];
        if (pool.size() < quota[cls]) {
            throw CorpusError("class \"" + d.class_names[cls] + "\" has " +
                              std::to_string(pool.size()) + " examples, needs " +
                              std::to_string(quota[cls]));
        }
        std::shuffle(pool.begin(), pool.end(), rng);
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<long>(quota[cls]));
    }
    Dataset out = d.like(DatasetKind::labeled);
    for (std::size_t i : take_sorted(std::move(chosen))) out.examples.push_back(d.examples[i]);
    return out;
}

Dataset strip_labels(const Dataset& d, std::size_t n, std::uint64_t seed) {
    if (n > d.examples.size()) {
        throw CorpusError("cannot draw " + std::to_string(n) + " unlabeled examples from " +
                          std::to_string(d.examples.size()));
    }
    std::vector<std::size_t> idx(d.examples.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(mix_seed(seed, 0x5A));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);
    Dataset out = d.like(DatasetKind::unlabeled);
    for (std::size_t i : take_sorted(std::move(idx))) {
        Example e = d.examples[i];
        e.label.reset();
        out.examples.push_back(std::move(e));
    }
    return out;
}

Dataset residual(const Dataset& d, const Dataset& taken) {
    std::unordered_set<std::size_t> ids;
    for (const Example& e : taken.examples) ids.insert(e.id);
    Dataset out = d.like(d.kind);
    for (const Example& e : d.examples) {
        if (!ids.contains(e.id)) out.examples.push_back(e);
    }
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(std::move(w));
    return out;
}

}  // namespace prompt_pet
