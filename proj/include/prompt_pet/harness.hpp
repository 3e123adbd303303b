#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prompt_pet/corpus.hpp"
#include "prompt_pet/pipeline.hpp"

namespace prompt_pet {

class HarnessError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GridDataset {
    std::string name;
    nlohmann::json source;  // a "dataset" section of a run config
    std::optional<FewShotSpec::Mode> few_shot_mode;
    std::vector<int> few_shot_ks;  // empty: the grid's list
};

struct ExperimentGrid {
    std::vector<GridDataset> datasets;
    std::vector<std::string> variants;
    std::vector<int> few_shot_ks;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::filesystem::path output_dir;
    // Run-config sections shared by every cell (backbone, hyperparameters, prompts, verbalizer).
    nlohmann::json base = nlohmann::json::object();
    std::size_t workers = 1;

    void validate() const;
};

ExperimentGrid grid_from_json(const nlohmann::json& j);
ExperimentGrid load_grid(const std::filesystem::path& path);

struct ReportRow {
    std::string dataset;
    Task task = Task::TC;
    int k = 0;
    std::string variant;
    double mean = 0.0;  // fraction correct
    double std = 0.0;   // sample standard deviation over seeds
    std::size_t n = 0;

    bool operator==(const ReportRow&) const = default;
};

struct CellFailure {
    std::string dataset;
    std::string variant;
    int k = 0;
    std::uint64_t seed = 0;
    std::string message;
};

// Per-variant means: each dataset is first averaged over its k values, then
// datasets are averaged with equal weight within a task and overall.
struct VariantAggregate {
    std::string variant;
    std::optional<double> tc;
    std::optional<double> nli;
    std::optional<double> overall;
};

struct Report {
    std::vector<ReportRow> rows;
    std::vector<CellFailure> failures;

    std::vector<VariantAggregate> aggregates() const;
    // Mean over k of one dataset's rows for `variant`.
    std::optional<double> dataset_mean(const std::string& dataset, const std::string& variant) const;
};

double sample_std(const std::vector<double>& values);
ReportRow summarize(const RunReport& r);
// Orders rows by (dataset, k, variant).
void sort_rows(std::vector<ReportRow>& rows);

// Executes every (dataset, variant, k, seed) cell; a failing cell is
// recorded and the rest continue. Writes report.json, failures.json and
// table.md under output_dir.
Report run_grid(const ExperimentGrid& g);

// Report assembled from the per-seed report.json files under `dir`, one row
// per (dataset, variant, k) with duplicate seeds counted once.
Report collect_report(const std::filesystem::path& dir);

enum class TableStyle { markdown, csv };
TableStyle parse_table_style(const std::string& s);

std::string emit_table(const Report& r, TableStyle style);
void write_table(const Report& r, TableStyle style, const std::filesystem::path& path);
std::vector<ReportRow> parse_csv(const std::string& text);

nlohmann::json to_json(const Report& r);

}  // namespace prompt_pet
