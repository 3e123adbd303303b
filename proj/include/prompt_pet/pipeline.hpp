#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prompt_pet/backbone.hpp"
#include "prompt_pet/corpus.hpp"
#include "prompt_pet/optim.hpp"
#include "prompt_pet/reparam.hpp"
#include "prompt_pet/templates.hpp"
#include "prompt_pet/verbalizers.hpp"

namespace prompt_pet {

class PipelineError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Hyperparameters {
    double lr = 1e-5;
    double weight_decay = 0.01;
    Schedule schedule = Schedule::linear;
    std::size_t batch_size = 2;
    std::size_t epochs = 5;
    std::size_t max_len = 256;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    // Prototype fitting after the prompt/backbone stage (full-batch steps).
    double prototype_lr = 1e-2;
    std::size_t prototype_epochs = 100;
    // Final-classifier training; unset values fall back to the fields above.
    std::optional<double> distill_lr;
    std::optional<std::size_t> distill_epochs;
    std::optional<std::size_t> distill_batch_size;

    void validate() const;
    double final_lr() const { return distill_lr.value_or(lr); }
    std::size_t final_epochs() const { return distill_epochs.value_or(epochs); }
    std::size_t final_batch_size() const { return distill_batch_size.value_or(batch_size); }
};

nlohmann::json to_json(const Hyperparameters& h);
Hyperparameters hyperparameters_from_json(const nlohmann::json& j);

struct TrainingRecord {
    std::uint64_t seed = 0;
    std::vector<double> epoch_losses;       // prompt/backbone stage, or distillation
    std::vector<double> prototype_losses;   // prototype stage, instance + prototype loss per step
    std::vector<std::string> flags;

    bool flagged() const { return !flags.empty(); }
};

nlohmann::json to_json(const TrainingRecord& r);
TrainingRecord training_record_from_json(const nlohmann::json& j);

// One prompt + verbalizer + backbone combination.
struct LabelerModel {
    std::unique_ptr<MaskedLanguageModel> backbone;
    Template prompt;
    std::optional<Example> demo;
    std::optional<ReparamBlock> reparam;
    std::unique_ptr<Verbalizer> verbalizer;
    std::vector<std::string> class_names;
    std::size_t max_len = 256;
    Hyperparameters hyper;
    TrainingRecord record;

    std::size_t num_classes() const { return class_names.size(); }
    // Throws PipelineError when the components disagree.
    void validate() const;

    RenderedSequence render(const Example& e) const;
    // Soft-token bank (soft_bank_size × d_model); empty without a reparam block.
    Matrix soft_bank() const;
    MaskOutput encode(const Example& e);
    MaskVars forward(Graph& g, const Example& e);
    Distribution predict(const Example& e);

    LabelerModel clone() const;
    void save(const std::filesystem::path& dir) const;
    static LabelerModel load(const std::filesystem::path& dir);
};

// Builds a labeler around `prompt`. A reparam block is created whenever the
// template has soft slots.
LabelerModel make_labeler(std::unique_ptr<MaskedLanguageModel> backbone, Template prompt,
                          std::optional<Example> demo, std::unique_ptr<Verbalizer> verbalizer,
                          std::vector<std::string> class_names, const Hyperparameters& h,
                          std::uint64_t seed);

// Cross-entropy on the class scores; the prototype vectors stay frozen.
void train_prompt_stage(LabelerModel& m, const Dataset& train, const Hyperparameters& h);
// Instance and prototype contrastive losses on prototypes only; a no-op for other verbalizers.
void train_prototype_stage(LabelerModel& m, const Dataset& train, const Hyperparameters& h);
// Both stages, plus the closed-form fit for search verbalizers.
LabelerModel train_labeler(LabelerModel init, const Dataset& train, const Hyperparameters& h);

struct SoftLabelSet {
    std::vector<std::pair<std::size_t, Distribution>> entries;
    std::size_t ensemble_size = 0;

    void validate(std::size_t num_classes) const;
};

// Distributions of one labeler over `u`, in example order.
struct LabelerOutputs {
    std::vector<std::size_t> ids;
    std::vector<Distribution> distributions;
};

LabelerOutputs labeler_outputs(LabelerModel& m, const Dataset& u);
// Per-class arithmetic mean; every output must list the same ids in the same order.
SoftLabelSet merge_outputs(std::span<const LabelerOutputs> outputs);
SoftLabelSet soft_label(std::span<LabelerModel> labelers, const Dataset& u, std::size_t workers = 1);

void save_soft_labels(const std::filesystem::path& path, const SoftLabelSet& s);
SoftLabelSet load_soft_labels(const std::filesystem::path& path);

inline constexpr double kKlFloor = 1e-12;

// sum target * log(target / max(pred, 1e-12)), with 0 log 0 = 0.
double kl_divergence(std::span<const double> target, std::span<const double> pred);

// Trains `final` to minimize the mean KL divergence against the soft labels.
void distill(SequenceClassifier& final, const SoftLabelSet& soft, const Dataset& u,
             const Hyperparameters& h, std::uint64_t seed, TrainingRecord* record = nullptr);

// Supervised cross-entropy training on labeled data (the fine-tune baseline).
void fine_tune(SequenceClassifier& model, const Dataset& train, const Hyperparameters& h,
               std::uint64_t seed, TrainingRecord* record = nullptr);

struct Predictions {
    std::vector<std::size_t> labels;
    double accuracy = 0.0;
};

double accuracy(std::span<const std::size_t> predicted, const Dataset& test);
Predictions predict_final(SequenceClassifier& final, const Dataset& test);
Predictions predict_labeler(LabelerModel& m, const Dataset& test);

// ---------------------------------------------------------------- run configuration

enum class Variant { demo_soft, vary_soft, fixed_soft, protoverb_manual, manual, finetune, demo_soft_sl };

Variant parse_variant(const std::string& s);
std::string to_string(Variant v);
bool uses_labelers(Variant v);
bool uses_unlabeled(Variant v);

// Marker-token data generated in place of a dataset directory.
struct SyntheticSource {
    std::size_t num_classes = 2;
    std::size_t labeled_pool = 200;
    std::size_t unlabeled = 2000;
    std::size_t test = 500;
    std::size_t noise_vocabulary = 40;
    std::size_t min_noise = 4;
    std::size_t max_noise = 8;
    std::uint64_t seed = 7;
};

struct DatasetSource {
    // Label used in reports; empty means the name in the dataset metadata.
    std::string name;
    // Directory holding metadata.json, train.jsonl, test.jsonl and
    // optionally unlabeled.jsonl.
    std::filesystem::path dir;
    std::optional<SyntheticSource> synthetic;
    // Unlabeled examples drawn per seed; unset takes the whole pool.
    std::optional<std::size_t> unlabeled_size;
    std::optional<std::size_t> test_size;
};

struct PromptOptions {
    std::vector<std::size_t> n_list{1, 2, 3, 4, 5};
    std::size_t demo_count = 5;
    std::size_t demo_n_soft = 5;
    std::size_t fixed_n_soft = 3;
    // Manual verbalizer index per manual template (0 = first verbalizer);
    // missing entries use 0.
    std::vector<std::size_t> manual_verbalizer;
};

struct VerbalizerOptions {
    // Unset: prototypical, or manual for the manual variant.
    std::optional<VerbalizerKind> kind;
    double temperature = 1.0;
    ProtoNormalizer normalizer = ProtoNormalizer::softmax;
    std::size_t search_k = 4;
};

struct RunConfig {
    std::filesystem::path run_dir;
    DatasetSource dataset;
    Variant variant = Variant::demo_soft;
    FewShotSpec::Mode few_shot_mode = FewShotSpec::Mode::per_class;
    int k = 10;
    BackboneConfig backbone;
    Hyperparameters hyper;
    PromptOptions prompts;
    VerbalizerOptions verbalizer;
    std::size_t workers = 1;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Labeled pool, unlabeled pool and test set named by a config.
struct SourceData {
    Dataset pool;
    std::optional<Dataset> unlabeled;
    Dataset test;
};
SourceData load_source(const DatasetSource& src);

// ---------------------------------------------------------------- run directory

struct SeedResult {
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    std::size_t labelers = 0;
    std::vector<std::string> flags;
};

struct RunReport {
    std::string variant;
    std::string dataset;
    Task task = Task::TC;
    int k = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> per_seed_acc;
    double mean_acc = 0.0;
    std::vector<std::string> flags;
};

nlohmann::json to_json(const RunReport& r);
RunReport run_report_from_json(const nlohmann::json& j);
// Mean of the per-seed accuracies.
RunReport make_run_report(const RunConfig& c, const std::string& dataset, Task task,
                          std::span<const SeedResult> results);

std::filesystem::path seed_dir(const std::filesystem::path& run_dir, std::uint64_t seed);
// Seed directories under `run_dir`, or `run_dir` itself when it is one.
std::vector<std::filesystem::path> seed_dirs(const std::filesystem::path& run_dir);

// Individual stages on one seed directory. prepare_seed_dir writes the
// config snapshot, splits and vocabulary.
void prepare_seed_dir(const RunConfig& c, std::uint64_t seed, const SourceData& data);
std::size_t stage_train_labelers(const std::filesystem::path& dir);
void stage_soft_label(const std::filesystem::path& dir);
void stage_distill(const std::filesystem::path& dir);
SeedResult stage_evaluate(const std::filesystem::path& dir, const std::filesystem::path& test_path);

// Labeler prototypes for one seed of a run (templates, demonstrations, untrained state).
std::vector<LabelerModel> build_labelers(const RunConfig& c, std::uint64_t seed, const Dataset& train,
                                         const Vocabulary& vocab);
Vocabulary build_vocabulary(const RunConfig& c, const Dataset& train, const Dataset* unlabeled);

// Every stage for one seed, in a fresh seed directory.
SeedResult run_seed(const RunConfig& c, std::uint64_t seed, const SourceData& data);
// Every stage for every seed; writes the aggregate report.json at run_dir.
RunReport run_pet(const RunConfig& c);
// Re-reads the per-seed report.json files and rewrites the aggregate.
RunReport aggregate_run(const std::filesystem::path& run_dir);

// Runs fn(0..n-1) on at most `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace prompt_pet
