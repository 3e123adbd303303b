#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "prompt_pet/checkpoint.hpp"
#include "prompt_pet/harness.hpp"
#include "prompt_pet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace prompt_pet;

namespace {

void print_run(const RunReport& r) { std::cout << to_json(r).dump(2) << "\n"; }

int train_labelers(const fs::path& config) {
    const RunConfig c = load_run_config(config);
    const SourceData data = load_source(c.dataset);
    fs::create_directories(c.run_dir);
    write_text_file(c.run_dir / "config.snapshot", to_json(c).dump(2) + "\n");
    for (std::uint64_t seed : c.hyper.seeds) {
        const fs::path dir = seed_dir(c.run_dir, seed);
        fs::remove_all(dir);
        prepare_seed_dir(c, seed, data);
        const std::size_t n = stage_train_labelers(dir);
        std::cout << dir.string() << ": trained " << n << " labeler(s)\n";
    }
    return 0;
}

int soft_label_cmd(const fs::path& run_dir) {
    for (const fs::path& dir : seed_dirs(run_dir)) {
        stage_soft_label(dir);
        std::cout << dir.string() << ": soft labels written\n";
    }
    return 0;
}

int distill_cmd(const fs::path& run_dir) {
    for (const fs::path& dir : seed_dirs(run_dir)) {
        stage_distill(dir);
        std::cout << dir.string() << ": final classifier written\n";
    }
    return 0;
}

int evaluate_cmd(const fs::path& run_dir, const fs::path& test) {
    for (const fs::path& dir : seed_dirs(run_dir)) {
        const SeedResult r = stage_evaluate(dir, test);
        std::printf("%s: seed %llu accuracy %.4f\n", dir.string().c_str(),
                    static_cast<unsigned long long>(r.seed), r.accuracy);
        for (const std::string& f : r.flags) std::printf("  flagged: %s\n", f.c_str());
    }
    print_run(aggregate_run(run_dir));
    return 0;
}

int grid_cmd(const fs::path& config) {
    const Report r = run_grid(load_grid(config));
    for (const CellFailure& f : r.failures) {
        std::cerr << "cell failed: " << f.dataset << " " << f.variant << " k=" << f.k << " seed=" << f.seed << ": "
                  << f.message << "\n";
    }
    if (r.rows.empty()) {
        std::cerr << "error: every grid cell failed\n";
        return 1;
    }
    std::cout << emit_table(r, TableStyle::markdown);
    return 0;
}

int report_cmd(const fs::path& run_dir, const std::string& style, const std::string& out) {
    const Report r = collect_report(run_dir);
    const TableStyle s = parse_table_style(style);
    if (out.empty()) {
        std::cout << emit_table(r, s);
    } else {
        write_table(r, s, out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised prompt-based few-shot classification"};
    app.require_subcommand(1);

    std::string config, run_dir, test, style = "markdown", out;

    auto* tl = app.add_subcommand("train-labelers", "Sample splits and train the labeler models");
    tl->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);

    auto* sl = app.add_subcommand("soft-label", "Ensemble soft labels for the unlabeled split");
    sl->add_option("--run-dir", run_dir, "Run directory")->required();

    auto* ds = app.add_subcommand("distill", "Train the final classifier on the soft labels");
    ds->add_option("--run-dir", run_dir, "Run directory")->required();

    auto* ev = app.add_subcommand("evaluate", "Score the final classifier on a test file");
    ev->add_option("--run-dir", run_dir, "Run directory")->required();
    ev->add_option("--test", test, "Test set (JSON lines)")->required()->check(CLI::ExistingFile);

    auto* rp = app.add_subcommand("run-pet", "Run every stage for every seed");
    rp->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);

    auto* gr = app.add_subcommand("grid", "Run an experiment grid");
    gr->add_option("--config", config, "Grid config (JSON)")->required()->check(CLI::ExistingFile);

    auto* rep = app.add_subcommand("report", "Tabulate report.json files under a directory");
    rep->add_option("--run-dir", run_dir, "Run or grid output directory")->required();
    rep->add_option("--style", style, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));
    rep->add_option("--out", out, "Write the table to this file instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*tl) return train_labelers(config);
        if (*sl) return soft_label_cmd(run_dir);
        if (*ds) return distill_cmd(run_dir);
        if (*ev) return evaluate_cmd(run_dir, test);
        if (*rp) {
            print_run(run_pet(load_run_config(config)));
            return 0;
        }
        if (*gr) return grid_cmd(config);
        if (*rep) return report_cmd(run_dir, style, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
