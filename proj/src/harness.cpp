#include "prompt_pet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "prompt_pet/checkpoint.hpp"

namespace prompt_pet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
    return buf;
}

std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Known variants in table order, then anything else alphabetically.
int variant_rank(const std::string& v) {
    try {
        return static_cast<int>(parse_variant(v));
    } catch (const PipelineError&) {
        return 1000;
    }
}

bool variant_less(const std::string& a, const std::string& b) {
    const int ra = variant_rank(a), rb = variant_rank(b);
    return ra != rb ? ra < rb : a < b;
}

std::optional<double> mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------- grid

void ExperimentGrid::validate() const {
    if (datasets.empty()) throw HarnessError("grid needs at least one dataset");
    if (variants.empty()) throw HarnessError("grid needs at least one variant");
    if (few_shot_ks.empty() &&
        std::any_of(datasets.begin(), datasets.end(), [](const GridDataset& d) { return d.few_shot_ks.empty(); })) {
        throw HarnessError("grid needs at least one few-shot k");
    }
    if (seeds.empty()) throw HarnessError("grid needs at least one seed");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw HarnessError("grid seeds must be distinct");
    }
    if (output_dir.empty()) throw HarnessError("grid output_dir is required");
    if (workers == 0) throw HarnessError("workers must be positive");
    std::set<std::string> names;
    for (const GridDataset& d : datasets) {
        if (d.name.empty()) throw HarnessError("grid dataset needs a name");
        if (!names.insert(d.name).second) throw HarnessError("duplicate grid dataset " + d.name);
    }
}

ExperimentGrid grid_from_json(const json& j) {
    ExperimentGrid g;
    try {
        for (const auto& [key, _] : j.items()) {
            static const std::set<std::string> allowed{"datasets", "variants", "few_shot_ks", "seeds",
                                                       "output_dir", "base", "workers"};
            if (!allowed.contains(key)) throw HarnessError("unknown key \"" + key + "\" in grid config");
        }
        for (const json& d : j.at("datasets")) {
            GridDataset gd;
            gd.name = d.at("name").get<std::string>();
            gd.source = d.at("source");
            if (d.contains("few_shot_mode")) gd.few_shot_mode = parse_few_shot_mode(d["few_shot_mode"].get<std::string>());
            if (d.contains("few_shot_ks")) gd.few_shot_ks = d["few_shot_ks"].get<std::vector<int>>();
            g.datasets.push_back(std::move(gd));
        }
        g.variants = j.at("variants").get<std::vector<std::string>>();
        g.few_shot_ks = j.value("few_shot_ks", std::vector<int>{});
        if (j.contains("seeds")) g.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        g.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("base")) g.base = j["base"];
        g.workers = j.value("workers", g.workers);
    } catch (const json::exception& e) {
        throw HarnessError(std::string("bad grid config: ") + e.what());
    }
    g.validate();
    return g;
}

ExperimentGrid load_grid(const fs::path& path) {
    if (!fs::exists(path)) throw HarnessError("grid config not found: " + path.string());
    try {
        return grid_from_json(json::parse(read_text_file(path)));
    } catch (const json::exception& e) {
        throw HarnessError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------- report

double sample_std(const std::vector<double>& values) {
    if (values.size() < 2) return 0.0;
    const double m = *mean_of(values);
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

ReportRow summarize(const RunReport& r) {
    if (r.per_seed_acc.empty()) throw HarnessError("run report has no accuracies");
    return {r.dataset, r.task, r.k, r.variant, *mean_of(r.per_seed_acc), sample_std(r.per_seed_acc),
            r.per_seed_acc.size()};
}

void sort_rows(std::vector<ReportRow>& rows) {
    std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
        if (a.dataset != b.dataset) return a.dataset < b.dataset;
        if (a.k != b.k) return a.k < b.k;
        return variant_less(a.variant, b.variant);
    });
}

std::optional<double> Report::dataset_mean(const std::string& dataset, const std::string& variant) const {
    std::vector<double> v;
    for (const ReportRow& r : rows) {
        if (r.dataset == dataset && r.variant == variant) v.push_back(r.mean);
    }
    return mean_of(v);
}

std::vector<VariantAggregate> Report::aggregates() const {
    std::vector<std::string> variants;
    std::map<std::string, Task> datasets;
    for (const ReportRow& r : rows) {
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
        auto [it, fresh] = datasets.emplace(r.dataset, r.task);
        if (!fresh && it->second != r.task) throw HarnessError("dataset " + r.dataset + " has rows for two tasks");
    }
    std::sort(variants.begin(), variants.end(), variant_less);
    std::vector<VariantAggregate> out;
    for (const std::string& v : variants) {
        std::vector<double> tc, nli, all;
        for (const auto& [name, task] : datasets) {
            const auto m = dataset_mean(name, v);
            if (!m) continue;
            (task == Task::TC ? tc : nli).push_back(*m);
            all.push_back(*m);
        }
        out.push_back({v, mean_of(tc), mean_of(nli), mean_of(all)});
    }
    return out;
}

json to_json(const Report& r) {
    json rows = json::array();
    for (const ReportRow& row : r.rows) {
        rows.push_back({{"dataset", row.dataset}, {"task", to_string(row.task)}, {"k", row.k},
                        {"variant", row.variant}, {"mean", row.mean}, {"std", row.std}, {"n", row.n}});
    }
    json aggs = json::array();
    for (const VariantAggregate& a : r.aggregates()) {
        json j{{"variant", a.variant}};
        j["tc"] = a.tc ? json(*a.tc) : json(nullptr);
        j["nli"] = a.nli ? json(*a.nli) : json(nullptr);
        j["overall"] = a.overall ? json(*a.overall) : json(nullptr);
        aggs.push_back(j);
    }
    json fails = json::array();
    for (const CellFailure& f : r.failures) {
        fails.push_back({{"dataset", f.dataset}, {"variant", f.variant}, {"k", f.k}, {"seed", f.seed},
                         {"message", f.message}});
    }
    return {{"rows", rows}, {"aggregates", aggs}, {"failures", fails}};
}

Report run_grid(const ExperimentGrid& g) {
    g.validate();
    struct Cell {
        std::size_t dataset;
        std::string variant;
        int k;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (std::size_t d = 0; d < g.datasets.size(); ++d) {
        const std::vector<int>& ks = g.datasets[d].few_shot_ks.empty() ? g.few_shot_ks : g.datasets[d].few_shot_ks;
        for (const std::string& v : g.variants)
            for (int k : ks)
                for (std::uint64_t s : g.seeds) cells.push_back({d, v, k, s});
    }

    // Sources are loaded once per dataset and shared read-only.
    std::vector<std::optional<SourceData>> sources(g.datasets.size());
    std::vector<std::string> source_errors(g.datasets.size());
    for (std::size_t d = 0; d < g.datasets.size(); ++d) {
        try {
            json probe = g.base;
            probe["run_dir"] = (g.output_dir / "probe").string();
            probe["dataset"] = g.datasets[d].source;
            probe["variant"] = g.variants.front();
            sources[d] = load_source(run_config_from_json(probe).dataset);
        } catch (const std::exception& e) {
            source_errors[d] = e.what();
        }
    }

    auto cell_config = [&](const Cell& c) {
        const GridDataset& ds = g.datasets[c.dataset];
        json j = g.base;
        j["run_dir"] = (g.output_dir / ds.name / c.variant / ("k" + std::to_string(c.k))).string();
        j["dataset"] = ds.source;
        if (!j["dataset"].contains("name")) j["dataset"]["name"] = ds.name;
        j["variant"] = c.variant;
        json fs_section = j.value("few_shot", json::object());
        fs_section["k"] = c.k;
        if (ds.few_shot_mode) fs_section["mode"] = to_string(*ds.few_shot_mode);
        j["few_shot"] = fs_section;
        json hyper = j.value("hyperparameters", json::object());
        hyper["seeds"] = {c.seed};
        j["hyperparameters"] = hyper;
        return run_config_from_json(j);
    };

    std::vector<std::optional<SeedResult>> results(cells.size());
    std::vector<std::string> errors(cells.size());
    std::mutex dir_mu;
    parallel_for(cells.size(), g.workers, [&](std::size_t i) {
        const Cell& c = cells[i];
        try {
            if (!sources[c.dataset]) throw HarnessError("dataset unavailable: " + source_errors[c.dataset]);
            const RunConfig cfg = cell_config(c);
            {
                std::lock_guard lock(dir_mu);
                fs::create_directories(cfg.run_dir);
            }
            results[i] = run_seed(cfg, c.seed, *sources[c.dataset]);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });

    // Assembly is single-threaded and follows cell order.
    Report report;
    std::map<std::tuple<std::size_t, std::string, int>, std::vector<SeedResult>> groups;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Cell& c = cells[i];
        if (results[i]) {
            groups[{c.dataset, c.variant, c.k}].push_back(*results[i]);
        } else {
            report.failures.push_back({g.datasets[c.dataset].name, c.variant, c.k, c.seed, errors[i]});
        }
    }
    for (const auto& [key, seeds] : groups) {
        const auto& [d, variant, k] = key;
        const Cell probe{d, variant, k, seeds.front().seed};
        RunConfig cfg = cell_config(probe);
        cfg.hyper.seeds.clear();
        for (const SeedResult& s : seeds) cfg.hyper.seeds.push_back(s.seed);
        const RunReport rr = make_run_report(cfg, sources[d]->pool.name, sources[d]->pool.task, seeds);
        write_text_file(cfg.run_dir / "report.json", to_json(rr).dump(2) + "\n");
        report.rows.push_back(summarize(rr));
    }
    sort_rows(report.rows);
    fs::create_directories(g.output_dir);
    write_text_file(g.output_dir / "report.json", to_json(report).dump(2) + "\n");
    if (!report.rows.empty()) write_table(report, TableStyle::markdown, g.output_dir / "table.md");
    return report;
}

Report collect_report(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw HarnessError("not a directory: " + dir.string());
    // (dataset, variant, k) -> seed -> accuracy
    std::map<std::tuple<std::string, std::string, int>, std::map<std::uint64_t, double>> cells;
    std::map<std::string, Task> tasks;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().filename() == "report.json" &&
            fs::is_directory(entry.path().parent_path() / "splits")) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
        const RunReport r = run_report_from_json(json::parse(read_text_file(f)));
        tasks[r.dataset] = r.task;
        auto& seeds = cells[{r.dataset, r.variant, r.k}];
        for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds.emplace(r.seeds[i], r.per_seed_acc[i]);
    }
    Report out;
    for (const auto& [key, seeds] : cells) {
        const auto& [dataset, variant, k] = key;
        std::vector<double> accs;
        for (const auto& [_, a] : seeds) accs.push_back(a);
        out.rows.push_back({dataset, tasks[dataset], k, variant, *mean_of(accs), sample_std(accs), accs.size()});
    }
    sort_rows(out.rows);
    return out;
}

// ---------------------------------------------------------------- tables

TableStyle parse_table_style(const std::string& s) {
    if (s == "markdown" || s == "md") return TableStyle::markdown;
    if (s == "csv") return TableStyle::csv;
    throw HarnessError("unknown table style: " + s);
}

std::string emit_table(const Report& r, TableStyle style) {
    if (r.rows.empty()) throw HarnessError("report is empty");
    std::vector<ReportRow> rows = r.rows;
    sort_rows(rows);
    std::ostringstream os;
    if (style == TableStyle::csv) {
        os << "dataset,task,k,variant,mean,std,n\n";
        for (const ReportRow& row : rows) {
            os << row.dataset << ',' << to_string(row.task) << ',' << row.k << ',' << row.variant << ','
               << full_precision(row.mean) << ',' << full_precision(row.std) << ',' << row.n << '\n';
        }
        return os.str();
    }

    std::vector<std::string> variants;
    for (const ReportRow& row : rows) {
        if (std::find(variants.begin(), variants.end(), row.variant) == variants.end()) variants.push_back(row.variant);
    }
    std::sort(variants.begin(), variants.end(), variant_less);
    os << "| Dataset | k |";
    for (const std::string& v : variants) os << ' ' << v << " |";
    os << "\n|---|---|";
    for (std::size_t i = 0; i < variants.size(); ++i) os << "---|";
    os << '\n';
    for (std::size_t i = 0; i < rows.size();) {
        std::size_t j = i;
        std::map<std::string, const ReportRow*> cells;
        double best = -1.0;
        while (j < rows.size() && rows[j].dataset == rows[i].dataset && rows[j].k == rows[i].k) {
            cells[rows[j].variant] = &rows[j];
            best = std::max(best, rows[j].mean);
            ++j;
        }
        os << "| " << rows[i].dataset << " | " << rows[i].k << " |";
        for (const std::string& v : variants) {
            auto it = cells.find(v);
            if (it == cells.end()) {
                os << " - |";
            } else if (it->second->mean == best && cells.size() > 1) {
                os << " **" << percent(it->second->mean) << "** |";
            } else {
                os << ' ' << percent(it->second->mean) << " |";
            }
        }
        os << '\n';
        i = j;
    }

    os << "\n| Variant | TC avg | NLI avg | Overall |\n|---|---|---|---|\n";
    Report sorted{rows, {}};
    for (const VariantAggregate& a : sorted.aggregates()) {
        auto cell = [](const std::optional<double>& v) { return v ? percent(*v) : std::string("-"); };
        os << "| " << a.variant << " | " << cell(a.tc) << " | " << cell(a.nli) << " | " << cell(a.overall) << " |\n";
    }
    return os.str();
}

void write_table(const Report& r, TableStyle style, const fs::path& path) {
    write_text_file(path, emit_table(r, style));
}

std::vector<ReportRow> parse_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "dataset,task,k,variant,mean,std,n") {
        throw HarnessError("csv report has an unexpected header");
    }
    std::vector<ReportRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) f.push_back(field);
        if (f.size() != 7) throw HarnessError("csv line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
        try {
            rows.push_back({f[0], parse_task(f[1]), std::stoi(f[2]), f[3], std::stod(f[4]), std::stod(f[5]),
                            static_cast<std::size_t>(std::stoul(f[6]))});
        } catch (const std::exception& e) {
            throw HarnessError("csv line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

}  // namespace prompt_pet
