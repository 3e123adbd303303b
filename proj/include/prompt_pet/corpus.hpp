#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace prompt_pet {

enum class Task { TC, NLI };
enum class DatasetKind { labeled, unlabeled, test };

Task parse_task(const std::string& s);
std::string to_string(Task t);
DatasetKind parse_kind(const std::string& s);
std::string to_string(DatasetKind k);

class CorpusError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Example {
    std::size_t id = 0;
    std::string text_a;
    std::optional<std::string> text_b;
    std::optional<std::size_t> label;

    // text_a followed by text_b when present, separated by one space.
    std::string joined_text() const;
    bool operator==(const Example&) const = default;
};

struct DatasetSchema {
    std::string name;
    Task task = Task::TC;
    std::vector<std::string> class_names;
    DatasetKind kind = DatasetKind::labeled;
};

struct Dataset {
    std::string name;
    Task task = Task::TC;
    std::vector<std::string> class_names;
    DatasetKind kind = DatasetKind::labeled;
    std::vector<Example> examples;

    std::size_t num_classes() const { return class_names.size(); }
    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
    // Throws CorpusError when a Dataset invariant does not hold.
    void validate() const;
    // Empty dataset sharing name/task/classes with `kind`.
    Dataset like(DatasetKind k) const;
    std::size_t class_index(const std::string& label) const;

    bool operator==(const Dataset&) const = default;
};

struct FewShotSpec {
    enum class Mode { per_class, total };
    Mode mode = Mode::per_class;
    int k = 1;
    std::uint64_t seed = 0;
};

FewShotSpec::Mode parse_few_shot_mode(const std::string& s);
std::string to_string(FewShotSpec::Mode m);

// Published sizes for the benchmark datasets (classes, unlabeled pool, test set).
struct DatasetStats {
    Task task;
    std::size_t num_classes;
    std::size_t unlabeled;
    std::size_t test;
};
std::optional<DatasetStats> known_dataset_stats(const std::string& name);

// metadata.json: {"name", "task", "class_names"}
DatasetSchema load_metadata(const std::filesystem::path& path, DatasetKind kind);
void write_metadata(const std::filesystem::path& path, const Dataset& d);

// JSON-lines records {"text_a", "text_b", "label", optional "id"}. Labels
// are class-name strings matched case-sensitively; ids default to the
// 0-based record index.
Dataset load_dataset(const std::filesystem::path& path, const DatasetSchema& schema);
void write_dataset(const std::filesystem::path& path, const Dataset& d);

Dataset sample_few_shot(const Dataset& d, const FewShotSpec& spec);
Dataset strip_labels(const Dataset& d, std::size_t n, std::uint64_t seed);
// Examples of `d` whose ids do not occur in `taken`.
Dataset residual(const Dataset& d, const Dataset& taken);

std::vector<std::string> split_words(const std::string& text);

}  // namespace prompt_pet
