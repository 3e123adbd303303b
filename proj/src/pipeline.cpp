#include "prompt_pet/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>
#include <unordered_map>

#include "prompt_pet/checkpoint.hpp"
#include "prompt_pet/random.hpp"
#include "prompt_pet/synthetic.hpp"

namespace prompt_pet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!j.is_object()) throw PipelineError(section + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
            allowed.end()) {
            throw PipelineError("unknown key \"" + key + "\" in " + section);
        }
    }
}

json example_to_json(const Example& e, std::span<const std::string> class_names) {
    json j{{"id", e.id}, {"text_a", e.text_a}};
    j["text_b"] = e.text_b ? json(*e.text_b) : json(nullptr);
    j["label"] = e.label ? json(class_names[*e.label]) : json(nullptr);
    return j;
}

Example example_from_json(const json& j, std::span<const std::string> class_names) {
    Example e;
    e.id = j.at("id").get<std::size_t>();
    e.text_a = j.at("text_a").get<std::string>();
    if (j.contains("text_b") && !j["text_b"].is_null()) e.text_b = j["text_b"].get<std::string>();
    if (j.contains("label") && !j["label"].is_null()) {
        const std::string label = j["label"].get<std::string>();
        auto it = std::find(class_names.begin(), class_names.end(), label);
        if (it == class_names.end()) throw PipelineError("unknown label \"" + label + "\"");
        e.label = static_cast<std::size_t>(it - class_names.begin());
    }
    return e;
}

std::size_t argmax(std::span<const double> p) {
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

void check_labeled(const Dataset& d, const char* what) {
    if (d.empty()) throw PipelineError(std::string(what) + " set is empty");
    for (const Example& e : d.examples) {
        if (!e.label) throw PipelineError(std::string(what) + " example " + std::to_string(e.id) + " has no label");
        if (*e.label >= d.num_classes()) throw PipelineError("label out of range");
    }
}

void flag_if_not_decreasing(const std::vector<double>& losses, const std::string& what,
                            std::vector<std::string>& flags) {
    if (losses.size() >= 2 && !(losses.back() < losses.front())) {
        flags.push_back(what + " loss did not decrease");
    }
}

Matrix gather_bank_rows(const Matrix& bank, const RenderedSequence& r) {
    const std::vector<std::size_t> idx = r.soft_bank_indices();
    Matrix out(idx.size(), bank.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = bank.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

std::size_t total_steps(std::size_t n, std::size_t batch, std::size_t epochs) {
    return epochs * ((n + batch - 1) / batch);
}

// Shared minibatch loop: `example_loss` builds the loss of one example on a
// tracking graph, already scaled by 1/batch, and returns its unscaled value.
template <typename Fn>
std::vector<double> minibatch_train(std::size_t n, ParameterList params, double lr, Schedule schedule,
                                    double weight_decay, std::size_t batch, std::size_t epochs,
                                    std::uint64_t shuffle_seed, Fn example_loss) {
    AdamW opt(AdamWOptions{.weight_decay = weight_decay});
    const std::size_t total = total_steps(n, batch, epochs);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(shuffle_seed);
    std::vector<double> losses;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            zero_grads(params);
            for (std::size_t b = start; b < end; ++b) {
                Graph g(true);
                auto [root, value] = example_loss(g, order[b], 1.0 / static_cast<double>(end - start));
                if (!std::isfinite(value)) throw PipelineError("non-finite training loss");
                g.backward(root);
                epoch_loss += value;
            }
            opt.step(params, scheduled_lr(schedule, lr, step++, total));
        }
        losses.push_back(epoch_loss / static_cast<double>(n));
    }
    zero_grads(params);
    return losses;
}

}  // namespace

// ---------------------------------------------------------------- hyperparameters

void Hyperparameters::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw PipelineError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw PipelineError("weight_decay must be non-negative");
    if (batch_size == 0) throw PipelineError("batch_size must be positive");
    if (epochs == 0) throw PipelineError("epochs must be positive");
    if (max_len < 8) throw PipelineError("max_len must be at least 8");
    if (seeds.empty()) throw PipelineError("at least one seed is required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw PipelineError("seeds must be distinct");
    }
    if (!(prototype_lr > 0.0)) throw PipelineError("prototype_lr must be positive");
    if (prototype_epochs == 0) throw PipelineError("prototype_epochs must be positive");
    if (distill_lr && !(*distill_lr > 0.0)) throw PipelineError("distill_lr must be positive");
    if (distill_epochs && *distill_epochs == 0) throw PipelineError("distill_epochs must be positive");
    if (distill_batch_size && *distill_batch_size == 0) throw PipelineError("distill_batch_size must be positive");
}

json to_json(const Hyperparameters& h) {
    json j{{"lr", h.lr},
           {"weight_decay", h.weight_decay},
           {"schedule", to_string(h.schedule)},
           {"batch_size", h.batch_size},
           {"epochs", h.epochs},
           {"max_len", h.max_len},
           {"seeds", h.seeds},
           {"prototype_lr", h.prototype_lr},
           {"prototype_epochs", h.prototype_epochs}};
    if (h.distill_lr) j["distill_lr"] = *h.distill_lr;
    if (h.distill_epochs) j["distill_epochs"] = *h.distill_epochs;
    if (h.distill_batch_size) j["distill_batch_size"] = *h.distill_batch_size;
    return j;
}

Hyperparameters hyperparameters_from_json(const json& j) {
    require_keys(j, {"lr", "weight_decay", "schedule", "batch_size", "epochs", "max_len", "seeds",
                     "prototype_lr", "prototype_epochs", "distill_lr", "distill_epochs", "distill_batch_size"},
                 "hyperparameters");
    Hyperparameters h;
    h.lr = j.value("lr", h.lr);
    h.weight_decay = j.value("weight_decay", h.weight_decay);
    if (j.contains("schedule")) h.schedule = parse_schedule(j["schedule"].get<std::string>());
    h.batch_size = j.value("batch_size", h.batch_size);
    h.epochs = j.value("epochs", h.epochs);
    h.max_len = j.value("max_len", h.max_len);
    if (j.contains("seeds")) h.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    h.prototype_lr = j.value("prototype_lr", h.prototype_lr);
    h.prototype_epochs = j.value("prototype_epochs", h.prototype_epochs);
    if (j.contains("distill_lr")) h.distill_lr = j["distill_lr"].get<double>();
    if (j.contains("distill_epochs")) h.distill_epochs = j["distill_epochs"].get<std::size_t>();
    if (j.contains("distill_batch_size")) h.distill_batch_size = j["distill_batch_size"].get<std::size_t>();
    h.validate();
    return h;
}

json to_json(const TrainingRecord& r) {
    return {{"seed", r.seed},
            {"epoch_losses", r.epoch_losses},
            {"prototype_losses", r.prototype_losses},
            {"flags", r.flags}};
}

TrainingRecord training_record_from_json(const json& j) {
    TrainingRecord r;
    r.seed = j.value("seed", std::uint64_t{0});
    r.epoch_losses = j.value("epoch_losses", std::vector<double>{});
    r.prototype_losses = j.value("prototype_losses", std::vector<double>{});
    r.flags = j.value("flags", std::vector<std::string>{});
    return r;
}

// ---------------------------------------------------------------- labeler

void LabelerModel::validate() const {
    if (!backbone) throw PipelineError("labeler has no backbone");
    if (!verbalizer) throw PipelineError("labeler has no verbalizer");
    prompt.validate();
    const std::size_t bank = prompt.soft_bank_size();
    if (bank > 0) {
        if (!reparam) throw PipelineError("template " + prompt.id + " has soft slots but no reparam block");
        if (reparam->n_tokens() != bank) {
            throw PipelineError("template " + prompt.id + " addresses " + std::to_string(bank) +
                                " soft tokens but the reparam block has " +
                                std::to_string(reparam->n_tokens()));
        }
        if (reparam->d_out() != backbone->config().d_model) {
            throw PipelineError("reparam output width does not match the backbone");
        }
    } else if (reparam) {
        throw PipelineError("template " + prompt.id + " has no soft slots but a reparam block");
    }
    if (verbalizer->num_classes() != class_names.size()) {
        throw PipelineError("verbalizer has " + std::to_string(verbalizer->num_classes()) +
                            " classes, dataset has " + std::to_string(class_names.size()));
    }
    if (prompt.has_demo() != demo.has_value()) {
        throw PipelineError("demonstration example does not match template " + prompt.id);
    }
}

RenderedSequence LabelerModel::render(const Example& e) const {
    return prompt_pet::render(prompt, e, demo ? &*demo : nullptr, class_names,
                              std::min(max_len, backbone->config().max_len));
}

Matrix LabelerModel::soft_bank() const { return reparam ? reparam->forward() : Matrix(); }

MaskOutput LabelerModel::encode(const Example& e) {
    const RenderedSequence r = render(e);
    return encode_masked(*backbone, r, gather_bank_rows(soft_bank(), r));
}

MaskVars LabelerModel::forward(Graph& g, const Example& e) {
    const RenderedSequence r = render(e);
    Var slots;
    if (reparam) {
        const std::vector<std::size_t> idx = r.soft_bank_indices();
        slots = ops::gather_rows(reparam->forward(g), idx);
    }
    return backbone->forward(g, r, slots);
}

Distribution LabelerModel::predict(const Example& e) { return verbalizer->predict(encode(e)); }

LabelerModel LabelerModel::clone() const {
    LabelerModel m;
    m.backbone = backbone->clone();
    m.prompt = prompt;
    m.demo = demo;
    m.reparam = reparam;
    m.verbalizer = verbalizer->clone();
    m.class_names = class_names;
    m.max_len = max_len;
    m.hyper = hyper;
    m.record = record;
    return m;
}

void LabelerModel::save(const fs::path& dir) const {
    validate();
    for (const char* sub : {"backbone", "verbalizer"}) fs::create_directories(dir / sub);
    backbone->save(dir / "backbone");
    if (reparam) {
        fs::create_directories(dir / "reparam");
        reparam->save(dir / "reparam");
    }
    verbalizer->save(dir / "verbalizer");
    write_text_file(dir / "template.json", to_json(prompt).dump(2) + "\n");
    if (demo) write_text_file(dir / "demo.json", example_to_json(*demo, class_names).dump(2) + "\n");
    json meta{{"class_names", class_names},
              {"max_len", max_len},
              {"hyperparameters", to_json(hyper)},
              {"training", to_json(record)}};
    write_text_file(dir / "labeler.json", meta.dump(2) + "\n");
}

LabelerModel LabelerModel::load(const fs::path& dir) {
    if (!fs::exists(dir / "labeler.json")) throw PipelineError("no labeler at " + dir.string());
    const json meta = json::parse(read_text_file(dir / "labeler.json"));
    LabelerModel m;
    m.class_names = meta.at("class_names").get<std::vector<std::string>>();
    m.max_len = meta.at("max_len").get<std::size_t>();
    m.hyper = hyperparameters_from_json(meta.at("hyperparameters"));
    m.record = training_record_from_json(meta.at("training"));
    m.backbone = load_masked_lm(dir / "backbone");
    m.prompt = template_from_json(json::parse(read_text_file(dir / "template.json")));
    if (fs::exists(dir / "demo.json")) {
        m.demo = example_from_json(json::parse(read_text_file(dir / "demo.json")), m.class_names);
    }
    if (fs::exists(dir / "reparam")) m.reparam = ReparamBlock::load(dir / "reparam");
    m.verbalizer = load_verbalizer(dir / "verbalizer", m.backbone->vocabulary());
    m.validate();
    return m;
}

LabelerModel make_labeler(std::unique_ptr<MaskedLanguageModel> backbone, Template prompt,
                          std::optional<Example> demo, std::unique_ptr<Verbalizer> verbalizer,
                          std::vector<std::string> class_names, const Hyperparameters& h,
                          std::uint64_t seed) {
    LabelerModel m;
    const std::size_t d = backbone->config().d_model;
    m.backbone = std::move(backbone);
    m.prompt = std::move(prompt);
    m.demo = std::move(demo);
    if (const std::size_t bank = m.prompt.soft_bank_size(); bank > 0) {
        m.reparam = ReparamBlock::init(bank, d, mix_seed(seed, 0x7E9A), d);
    }
    m.verbalizer = std::move(verbalizer);
    m.class_names = std::move(class_names);
    m.max_len = h.max_len;
    m.hyper = h;
    m.record.seed = seed;
    m.validate();
    return m;
}

void train_prompt_stage(LabelerModel& m, const Dataset& train, const Hyperparameters& h) {
    check_labeled(train, "training");
    m.validate();
    ParameterList params = m.backbone->parameters();
    if (m.reparam) {
        ParameterList rp = m.reparam->parameters();
        params.insert(params.end(), rp.begin(), rp.end());
    }
    ParameterList vp = m.verbalizer->joint_parameters();
    params.insert(params.end(), vp.begin(), vp.end());

    m.record.epoch_losses = minibatch_train(
        train.size(), params, h.lr, h.schedule, h.weight_decay, h.batch_size, h.epochs,
        mix_seed(m.record.seed, 0x57A6E1), [&](Graph& g, std::size_t i, double scale) {
            const Example& e = train.examples[i];
            Var scores = m.verbalizer->scores(g, m.forward(g, e));
            Var nll = ops::scale(ops::pick(ops::log_softmax_rows(scores), 0, *e.label), -1.0);
            return std::pair{ops::scale(nll, scale), nll.value()(0, 0)};
        });
    if (auto* proto = dynamic_cast<PrototypicalVerbalizer*>(m.verbalizer.get())) {
        proto->prototype_parameter().zero_grad();
    }
    flag_if_not_decreasing(m.record.epoch_losses, "prompt-stage", m.record.flags);
}

void train_prototype_stage(LabelerModel& m, const Dataset& train, const Hyperparameters& h) {
    auto* proto = dynamic_cast<PrototypicalVerbalizer*>(m.verbalizer.get());
    if (!proto) return;
    check_labeled(train, "training");
    const std::size_t d = m.backbone->config().d_model;
    Matrix hidden(train.size(), d);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const MaskOutput out = m.encode(train.examples[i]);
        std::copy(out.mask_hidden.values().begin(), out.mask_hidden.values().end(), hidden.row(i).begin());
        labels.push_back(*train.examples[i].label);
    }
    const bool with_instance = has_positive_pair(labels);
    const double tau = proto->temperature();
    Parameter& p = proto->prototype_parameter();
    Parameter* params[] = {&p};
    AdamW opt(AdamWOptions{.weight_decay = h.weight_decay});
    m.record.prototype_losses.clear();
    for (std::size_t step = 0; step < h.prototype_epochs; ++step) {
        p.zero_grad();
        Graph g(true);
        Var inst = g.constant(hidden);
        Var loss = prototype_loss(inst, g.parameter(p), labels, tau);
        if (with_instance) loss = ops::add(loss, instance_loss(inst, labels, tau));
        const double value = loss.value()(0, 0);
        if (!std::isfinite(value)) throw PipelineError("non-finite prototype loss");
        g.backward(loss);
        opt.step(params, scheduled_lr(h.schedule, h.prototype_lr, step, h.prototype_epochs));
        m.record.prototype_losses.push_back(value);
    }
    p.zero_grad();
    flag_if_not_decreasing(m.record.prototype_losses, "prototype-stage", m.record.flags);
}

LabelerModel train_labeler(LabelerModel init, const Dataset& train, const Hyperparameters& h) {
    h.validate();
    check_labeled(train, "training");
    if (train.num_classes() != init.num_classes()) throw PipelineError("class count mismatch");
    init.hyper = h;
    train_prompt_stage(init, train, h);
    if (auto* search = dynamic_cast<SearchVerbalizer*>(init.verbalizer.get())) {
        Matrix logits(train.size(), init.backbone->vocabulary().size());
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < train.size(); ++i) {
            const MaskOutput out = init.encode(train.examples[i]);
            std::copy(out.mask_logits.values().begin(), out.mask_logits.values().end(), logits.row(i).begin());
            labels.push_back(*train.examples[i].label);
        }
        search->fit(logits, labels);
    }
    train_prototype_stage(init, train, h);
    return init;
}

// ---------------------------------------------------------------- soft labels

void SoftLabelSet::validate(std::size_t num_classes) const {
    if (ensemble_size == 0) throw PipelineError("soft labels need at least one labeler");
    for (const auto& [id, p] : entries) {
        if (p.size() != num_classes) throw PipelineError("soft label for " + std::to_string(id) + " has wrong width");
        if (!is_distribution(p)) throw PipelineError("soft label for " + std::to_string(id) + " is not a distribution");
    }
}

LabelerOutputs labeler_outputs(LabelerModel& m, const Dataset& u) {
    m.validate();
    const Matrix bank = m.soft_bank();
    LabelerOutputs out;
    out.ids.reserve(u.size());
    out.distributions.reserve(u.size());
    for (const Example& e : u.examples) {
        const RenderedSequence r = m.render(e);
        Distribution p = m.verbalizer->predict(encode_masked(*m.backbone, r, gather_bank_rows(bank, r)));
        if (!is_distribution(p)) throw PipelineError("labeler produced an invalid distribution");
        out.ids.push_back(e.id);
        out.distributions.push_back(std::move(p));
    }
    return out;
}

SoftLabelSet merge_outputs(std::span<const LabelerOutputs> outputs) {
    if (outputs.empty()) throw PipelineError("soft labeling needs at least one labeler");
    const LabelerOutputs& first = outputs.front();
    for (const LabelerOutputs& o : outputs) {
        if (o.ids != first.ids) throw PipelineError("labeler outputs list different examples");
        if (o.distributions.size() != o.ids.size()) throw PipelineError("labeler outputs are incomplete");
    }
    const std::size_t c = first.distributions.empty() ? 0 : first.distributions.front().size();
    SoftLabelSet s;
    s.ensemble_size = outputs.size();
    for (std::size_t i = 0; i < first.ids.size(); ++i) {
        Distribution mean(c, 0.0);
        for (const LabelerOutputs& o : outputs) {
            if (o.distributions[i].size() != c) throw PipelineError("labelers disagree on the class count");
            for (std::size_t y = 0; y < c; ++y) mean[y] += o.distributions[i][y];
        }
        for (double& v : mean) v /= static_cast<double>(outputs.size());
        s.entries.emplace_back(first.ids[i], std::move(mean));
    }
    return s;
}

SoftLabelSet soft_label(std::span<LabelerModel> labelers, const Dataset& u, std::size_t workers) {
    if (labelers.empty()) throw PipelineError("soft labeling needs at least one labeler");
    for (const LabelerModel& m : labelers) {
        if (m.num_classes() != labelers.front().num_classes() ||
            m.verbalizer->num_classes() != labelers.front().num_classes()) {
            throw PipelineError("labelers disagree on the class count");
        }
    }
    std::vector<LabelerOutputs> outputs(labelers.size());
    parallel_for(labelers.size(), workers, [&](std::size_t i) { outputs[i] = labeler_outputs(labelers[i], u); });
    return merge_outputs(outputs);
}

void save_soft_labels(const fs::path& path, const SoftLabelSet& s) {
    std::string text;
    for (const auto& [id, p] : s.entries) text += json{{"id", id}, {"p", p}}.dump() + "\n";
    write_text_file(path, text);
    write_text_file(fs::path(path).replace_extension(".meta.json"),
                    json{{"ensemble_size", s.ensemble_size}}.dump(2) + "\n");
}

SoftLabelSet load_soft_labels(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw PipelineError("cannot read soft labels " + path.string());
    SoftLabelSet s;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            s.entries.emplace_back(j.at("id").get<std::size_t>(), j.at("p").get<Distribution>());
        } catch (const json::exception& e) {
            throw PipelineError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    const fs::path meta = fs::path(path).replace_extension(".meta.json");
    s.ensemble_size = fs::exists(meta) ? json::parse(read_text_file(meta)).at("ensemble_size").get<std::size_t>() : 1;
    return s;
}

double kl_divergence(std::span<const double> target, std::span<const double> pred) {
    if (target.size() != pred.size()) throw PipelineError("distributions differ in length");
    if (!is_distribution(target) || !is_distribution(pred)) throw PipelineError("invalid distribution");
    double s = 0.0;
    for (std::size_t y = 0; y < target.size(); ++y) {
        if (target[y] > 0.0) s += target[y] * (std::log(target[y]) - std::log(std::max(pred[y], kKlFloor)));
    }
    return std::max(0.0, s);
}

// ---------------------------------------------------------------- final classifier

void distill(SequenceClassifier& final, const SoftLabelSet& soft, const Dataset& u, const Hyperparameters& h,
             std::uint64_t seed, TrainingRecord* record) {
    h.validate();
    if (u.empty()) throw PipelineError("unlabeled set is empty");
    soft.validate(final.num_classes());
    std::unordered_map<std::size_t, const Distribution*> by_id;
    for (const auto& [id, p] : soft.entries) by_id[id] = &p;
    std::vector<const Distribution*> targets;
    std::vector<double> entropy_terms;
    for (const Example& e : u.examples) {
        auto it = by_id.find(e.id);
        if (it == by_id.end()) throw PipelineError("no soft label for unlabeled example " + std::to_string(e.id));
        targets.push_back(it->second);
        double plogp = 0.0;
        for (double v : *it->second) if (v > 0.0) plogp += v * std::log(v);
        entropy_terms.push_back(plogp);
    }
    const double log_floor = std::log(kKlFloor);
    std::vector<double> losses = minibatch_train(
        u.size(), final.parameters(), h.final_lr(), h.schedule, h.weight_decay, h.final_batch_size(),
        h.final_epochs(), mix_seed(seed, 0xD157), [&](Graph& g, std::size_t i, double scale) {
            const Distribution& p = *targets[i];
            Matrix w(1, p.size());
            for (std::size_t y = 0; y < p.size(); ++y) w(0, y) = p[y];
            Var logq = ops::clamp_min(ops::log_softmax_rows(final.forward(g, u.examples[i])), log_floor);
            Var cross = ops::scale(ops::weighted_sum(logq, w), -1.0);
            return std::pair{ops::scale(cross, scale), entropy_terms[i] + cross.value()(0, 0)};
        });
    if (record) {
        record->seed = seed;
        record->epoch_losses = losses;
        flag_if_not_decreasing(losses, "distillation", record->flags);
    }
}

void fine_tune(SequenceClassifier& model, const Dataset& train, const Hyperparameters& h, std::uint64_t seed,
               TrainingRecord* record) {
    h.validate();
    check_labeled(train, "training");
    if (train.num_classes() != model.num_classes()) throw PipelineError("class count mismatch");
    std::vector<double> losses = minibatch_train(
        train.size(), model.parameters(), h.lr, h.schedule, h.weight_decay, h.batch_size, h.epochs,
        mix_seed(seed, 0xF17E), [&](Graph& g, std::size_t i, double scale) {
            const Example& e = train.examples[i];
            Var nll = ops::scale(ops::pick(ops::log_softmax_rows(model.forward(g, e)), 0, *e.label), -1.0);
            return std::pair{ops::scale(nll, scale), nll.value()(0, 0)};
        });
    if (record) {
        record->seed = seed;
        record->epoch_losses = losses;
        flag_if_not_decreasing(losses, "fine-tune", record->flags);
    }
}

double accuracy(std::span<const std::size_t> predicted, const Dataset& test) {
    if (test.empty()) throw PipelineError("test set is empty");
    if (predicted.size() != test.size()) throw PipelineError("prediction count does not match the test set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const auto& label = test.examples[i].label;
        if (!label) throw PipelineError("test example " + std::to_string(test.examples[i].id) + " has no label");
        if (predicted[i] == *label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

Predictions predict_final(SequenceClassifier& final, const Dataset& test) {
    if (test.empty()) throw PipelineError("test set is empty");
    if (final.num_classes() != test.num_classes()) {
        throw PipelineError("classifier has " + std::to_string(final.num_classes()) + " classes, test set has " +
                            std::to_string(test.num_classes()));
    }
    Predictions out;
    for (const Example& e : test.examples) out.labels.push_back(argmax(classify(final, e)));
    out.accuracy = accuracy(out.labels, test);
    return out;
}

Predictions predict_labeler(LabelerModel& m, const Dataset& test) {
    if (test.empty()) throw PipelineError("test set is empty");
    if (m.num_classes() != test.num_classes()) throw PipelineError("class count mismatch");
    Predictions out;
    for (const Distribution& p : labeler_outputs(m, test).distributions) out.labels.push_back(argmax(p));
    out.accuracy = accuracy(out.labels, test);
    return out;
}

// ---------------------------------------------------------------- run configuration

Variant parse_variant(const std::string& s) {
    if (s == "demo_soft") return Variant::demo_soft;
    if (s == "vary_soft") return Variant::vary_soft;
    if (s == "fixed_soft") return Variant::fixed_soft;
    if (s == "protoverb_manual") return Variant::protoverb_manual;
    if (s == "manual") return Variant::manual;
    if (s == "finetune") return Variant::finetune;
    if (s == "demo_soft_sl") return Variant::demo_soft_sl;
    throw PipelineError("unknown variant: " + s);
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::demo_soft: return "demo_soft";
        case Variant::vary_soft: return "vary_soft";
        case Variant::fixed_soft: return "fixed_soft";
        case Variant::protoverb_manual: return "protoverb_manual";
        case Variant::manual: return "manual";
        case Variant::finetune: return "finetune";
        case Variant::demo_soft_sl: return "demo_soft_sl";
    }
    return "?";
}

bool uses_labelers(Variant v) { return v != Variant::finetune; }
bool uses_unlabeled(Variant v) { return v != Variant::finetune && v != Variant::demo_soft_sl; }

void RunConfig::validate() const {
    if (run_dir.empty()) throw PipelineError("run_dir is required");
    if (dataset.dir.empty() && !dataset.synthetic) throw PipelineError("dataset.dir or dataset.synthetic is required");
    if (k < 1) throw PipelineError("few_shot.k must be positive");
    backbone.validate();
    hyper.validate();
    if (prompts.n_list.empty()) throw PipelineError("prompts.n_list must not be empty");
    if (prompts.demo_count == 0 || prompts.demo_n_soft == 0 || prompts.fixed_n_soft == 0) {
        throw PipelineError("prompt counts must be positive");
    }
    if (!(verbalizer.temperature > 0.0)) throw PipelineError("verbalizer.temperature must be positive");
    if (verbalizer.search_k == 0) throw PipelineError("verbalizer.search_k must be positive");
    if (workers == 0) throw PipelineError("workers must be positive");
}

json to_json(const RunConfig& c) {
    json ds;
    if (!c.dataset.name.empty()) ds["name"] = c.dataset.name;
    if (!c.dataset.dir.empty()) ds["dir"] = c.dataset.dir.string();
    if (c.dataset.synthetic) {
        const SyntheticSource& s = *c.dataset.synthetic;
        ds["synthetic"] = {{"num_classes", s.num_classes}, {"labeled_pool", s.labeled_pool},
                           {"unlabeled", s.unlabeled},     {"test", s.test},
                           {"noise_vocabulary", s.noise_vocabulary}, {"min_noise", s.min_noise},
                           {"max_noise", s.max_noise},     {"seed", s.seed}};
    }
    if (c.dataset.unlabeled_size) ds["unlabeled_size"] = *c.dataset.unlabeled_size;
    if (c.dataset.test_size) ds["test_size"] = *c.dataset.test_size;
    json verb{{"temperature", c.verbalizer.temperature},
              {"normalizer", to_string(c.verbalizer.normalizer)},
              {"search_k", c.verbalizer.search_k}};
    if (c.verbalizer.kind) verb["kind"] = to_string(*c.verbalizer.kind);
    return {{"run_dir", c.run_dir.string()},
            {"dataset", ds},
            {"variant", to_string(c.variant)},
            {"few_shot", {{"mode", to_string(c.few_shot_mode)}, {"k", c.k}}},
            {"backbone", to_json(c.backbone)},
            {"hyperparameters", to_json(c.hyper)},
            {"prompts",
             {{"n_list", c.prompts.n_list},
              {"demo_count", c.prompts.demo_count},
              {"demo_n_soft", c.prompts.demo_n_soft},
              {"fixed_n_soft", c.prompts.fixed_n_soft},
              {"manual_verbalizer", c.prompts.manual_verbalizer}}},
            {"verbalizer", verb},
            {"workers", c.workers}};
}

RunConfig run_config_from_json(const json& j) {
    require_keys(j, {"run_dir", "dataset", "variant", "few_shot", "backbone", "hyperparameters", "prompts",
                     "verbalizer", "workers"},
                 "config");
    RunConfig c;
    try {
        c.run_dir = j.at("run_dir").get<std::string>();
        const json& ds = j.at("dataset");
        require_keys(ds, {"name", "dir", "synthetic", "unlabeled_size", "test_size"}, "dataset");
        if (ds.contains("name")) c.dataset.name = ds["name"].get<std::string>();
        if (ds.contains("dir")) c.dataset.dir = ds["dir"].get<std::string>();
        if (ds.contains("synthetic")) {
            const json& sj = ds["synthetic"];
            require_keys(sj, {"num_classes", "labeled_pool", "unlabeled", "test", "noise_vocabulary", "min_noise",
                              "max_noise", "seed"},
                         "dataset.synthetic");
            SyntheticSource s;
            s.num_classes = sj.value("num_classes", s.num_classes);
            s.labeled_pool = sj.value("labeled_pool", s.labeled_pool);
            s.unlabeled = sj.value("unlabeled", s.unlabeled);
            s.test = sj.value("test", s.test);
            s.noise_vocabulary = sj.value("noise_vocabulary", s.noise_vocabulary);
            s.min_noise = sj.value("min_noise", s.min_noise);
            s.max_noise = sj.value("max_noise", s.max_noise);
            s.seed = sj.value("seed", s.seed);
            c.dataset.synthetic = s;
        }
        if (ds.contains("unlabeled_size")) c.dataset.unlabeled_size = ds["unlabeled_size"].get<std::size_t>();
        if (ds.contains("test_size")) c.dataset.test_size = ds["test_size"].get<std::size_t>();
        c.variant = parse_variant(j.at("variant").get<std::string>());
        if (j.contains("few_shot")) {
            require_keys(j["few_shot"], {"mode", "k"}, "few_shot");
            c.few_shot_mode = parse_few_shot_mode(j["few_shot"].value("mode", std::string("per_class")));
            c.k = j["few_shot"].value("k", c.k);
        }
        if (j.contains("backbone")) c.backbone = backbone_config_from_json(j["backbone"]);
        if (j.contains("hyperparameters")) c.hyper = hyperparameters_from_json(j["hyperparameters"]);
        if (j.contains("prompts")) {
            const json& pj = j["prompts"];
            require_keys(pj, {"n_list", "demo_count", "demo_n_soft", "fixed_n_soft", "manual_verbalizer"}, "prompts");
            if (pj.contains("n_list")) c.prompts.n_list = pj["n_list"].get<std::vector<std::size_t>>();
            c.prompts.demo_count = pj.value("demo_count", c.prompts.demo_count);
            c.prompts.demo_n_soft = pj.value("demo_n_soft", c.prompts.demo_n_soft);
            c.prompts.fixed_n_soft = pj.value("fixed_n_soft", c.prompts.fixed_n_soft);
            if (pj.contains("manual_verbalizer")) {
                c.prompts.manual_verbalizer = pj["manual_verbalizer"].get<std::vector<std::size_t>>();
            }
        }
        if (j.contains("verbalizer")) {
            const json& vj = j["verbalizer"];
            require_keys(vj, {"kind", "temperature", "normalizer", "search_k"}, "verbalizer");
            if (vj.contains("kind")) c.verbalizer.kind = parse_verbalizer_kind(vj["kind"].get<std::string>());
            c.verbalizer.temperature = vj.value("temperature", c.verbalizer.temperature);
            if (vj.contains("normalizer")) {
                c.verbalizer.normalizer = parse_proto_normalizer(vj["normalizer"].get<std::string>());
            }
            c.verbalizer.search_k = vj.value("search_k", c.verbalizer.search_k);
        }
        c.workers = j.value("workers", c.workers);
    } catch (const json::exception& e) {
        throw PipelineError(std::string("bad config: ") + e.what());
    } catch (const std::runtime_error& e) {
        if (dynamic_cast<const PipelineError*>(&e)) throw;
        throw PipelineError(std::string("bad config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw PipelineError("config not found: " + path.string());
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw PipelineError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

SourceData load_source(const DatasetSource& src) {
    SourceData out;
    if (src.synthetic) {
        const SyntheticSource& s = *src.synthetic;
        MarkerDataOptions opts;
        opts.num_classes = s.num_classes;
        opts.noise_vocabulary = s.noise_vocabulary;
        opts.min_noise = s.min_noise;
        opts.max_noise = s.max_noise;
        opts.seed = s.seed;
        out.pool = make_marker_dataset(s.labeled_pool, DatasetKind::labeled, opts, 0);
        opts.seed = mix_seed(s.seed, 1);
        out.unlabeled = make_marker_dataset(s.unlabeled, DatasetKind::unlabeled, opts, s.labeled_pool);
        opts.seed = mix_seed(s.seed, 2);
        out.test = make_marker_dataset(s.test, DatasetKind::test, opts, s.labeled_pool + s.unlabeled);
    } else {
        if (!fs::is_directory(src.dir)) throw PipelineError("dataset directory not found: " + src.dir.string());
        const fs::path meta = src.dir / "metadata.json";
        out.pool = load_dataset(src.dir / "train.jsonl", load_metadata(meta, DatasetKind::labeled));
        if (fs::exists(src.dir / "unlabeled.jsonl")) {
            out.unlabeled = load_dataset(src.dir / "unlabeled.jsonl", load_metadata(meta, DatasetKind::unlabeled));
        }
        out.test = load_dataset(src.dir / "test.jsonl", load_metadata(meta, DatasetKind::test));
    }
    if (src.test_size && *src.test_size < out.test.size()) out.test.examples.resize(*src.test_size);
    return out;
}

// ---------------------------------------------------------------- run directory

json to_json(const RunReport& r) {
    return {{"variant", r.variant},   {"dataset", r.dataset},           {"task", to_string(r.task)},
            {"k", r.k},               {"seeds", r.seeds},               {"per_seed_acc", r.per_seed_acc},
            {"mean_acc", r.mean_acc}, {"flags", r.flags}};
}

RunReport run_report_from_json(const json& j) {
    RunReport r;
    r.variant = j.at("variant").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.task = parse_task(j.at("task").get<std::string>());
    r.k = j.at("k").get<int>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.per_seed_acc = j.at("per_seed_acc").get<std::vector<double>>();
    r.mean_acc = j.at("mean_acc").get<double>();
    r.flags = j.value("flags", std::vector<std::string>{});
    if (r.seeds.size() != r.per_seed_acc.size()) throw PipelineError("report seeds and accuracies differ in length");
    return r;
}

RunReport make_run_report(const RunConfig& c, const std::string& dataset, Task task,
                          std::span<const SeedResult> results) {
    RunReport r;
    r.variant = to_string(c.variant);
    r.dataset = c.dataset.name.empty() ? dataset : c.dataset.name;
    r.task = task;
    r.k = c.k;
    double sum = 0.0;
    for (const SeedResult& s : results) {
        r.seeds.push_back(s.seed);
        r.per_seed_acc.push_back(s.accuracy);
        sum += s.accuracy;
        for (const std::string& f : s.flags) r.flags.push_back("seed " + std::to_string(s.seed) + ": " + f);
    }
    r.mean_acc = results.empty() ? 0.0 : sum / static_cast<double>(results.size());
    return r;
}

fs::path seed_dir(const fs::path& run_dir, std::uint64_t seed) { return run_dir / ("seed-" + std::to_string(seed)); }

std::vector<fs::path> seed_dirs(const fs::path& run_dir) {
    if (fs::exists(run_dir / "config.snapshot") && fs::is_directory(run_dir / "splits")) return {run_dir};
    if (!fs::is_directory(run_dir)) throw PipelineError("run directory not found: " + run_dir.string());
    std::vector<std::pair<std::uint64_t, fs::path>> found;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        const std::string name = entry.path().filename().string();
        if (!entry.is_directory() || name.rfind("seed-", 0) != 0) continue;
        try {
            found.emplace_back(std::stoull(name.substr(5)), entry.path());
        } catch (const std::exception&) {
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<fs::path> out;
    for (auto& [_, p] : found) out.push_back(std::move(p));
    if (out.empty()) throw PipelineError("no seed directories under " + run_dir.string());
    return out;
}

namespace {

struct SeedContext {
    RunConfig config;
    std::uint64_t seed = 0;
    DatasetSchema labeled;
};

SeedContext open_seed_dir(const fs::path& dir) {
    SeedContext ctx;
    ctx.config = load_run_config(dir / "config.snapshot");
    ctx.seed = ctx.config.hyper.seeds.front();
    ctx.labeled = load_metadata(dir / "splits" / "metadata.json", DatasetKind::labeled);
    return ctx;
}

Dataset load_split(const fs::path& dir, const std::string& name, DatasetKind kind) {
    return load_dataset(dir / "splits" / (name + ".jsonl"), load_metadata(dir / "splits" / "metadata.json", kind));
}

std::vector<fs::path> labeler_dirs(const fs::path& dir) {
    std::vector<std::pair<std::size_t, fs::path>> found;
    if (fs::is_directory(dir / "labelers")) {
        for (const auto& entry : fs::directory_iterator(dir / "labelers")) {
            if (!entry.is_directory()) continue;
            try {
                found.emplace_back(std::stoul(entry.path().filename().string()), entry.path());
            } catch (const std::exception&) {
            }
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<fs::path> out;
    for (auto& [_, p] : found) out.push_back(std::move(p));
    return out;
}

std::vector<Template> variant_templates(const RunConfig& c, std::uint64_t seed, const Dataset& train,
                                        std::vector<ManualVerbalizer>* manual_words) {
    switch (c.variant) {
        case Variant::demo_soft: return build_demo_soft_family(train, c.prompts.demo_count, c.prompts.demo_n_soft, seed);
        case Variant::demo_soft_sl: return build_demo_soft_family(train, 1, c.prompts.demo_n_soft, seed);
        case Variant::vary_soft: return build_vary_soft_family(c.prompts.n_list, train.task);
        case Variant::fixed_soft:
            return {continuous_template(train.task, c.prompts.fixed_n_soft,
                                        "fixed_soft_n" + std::to_string(c.prompts.fixed_n_soft))};
        case Variant::protoverb_manual:
        case Variant::manual: {
            std::vector<Template> out;
            const auto catalog = manual_catalog(train.name);
            const auto all_words = manual_verbalizers(train.name);
            for (std::size_t i = 0; i < catalog.size(); ++i) {
                out.push_back(catalog[i].prompt);
                if (manual_words) {
                    ManualVerbalizer v = catalog[i].verbalizer;
                    if (i < c.prompts.manual_verbalizer.size()) {
                        const std::size_t which = c.prompts.manual_verbalizer[i];
                        if (which >= all_words.size()) throw PipelineError("manual_verbalizer index out of range");
                        v = all_words[which];
                        v.label_words.resize(train.num_classes());
                    }
                    manual_words->push_back(std::move(v));
                }
            }
            return out;
        }
        case Variant::finetune: return {};
    }
    return {};
}

VerbalizerKind verbalizer_kind(const RunConfig& c) {
    return c.verbalizer.kind.value_or(c.variant == Variant::manual ? VerbalizerKind::manual
                                                                   : VerbalizerKind::prototypical);
}

ManualVerbalizer class_name_words(std::span<const std::string> class_names) {
    ManualVerbalizer v;
    for (const std::string& name : class_names) {
        const auto words = split_words(name);
        if (words.empty()) throw PipelineError("empty class name");
        v.label_words.push_back(words.front());
    }
    return v;
}

}  // namespace

Vocabulary build_vocabulary(const RunConfig& c, const Dataset& train, const Dataset* unlabeled) {
    std::vector<std::string> texts;
    for (const Example& e : train.examples) texts.push_back(e.joined_text());
    if (unlabeled) {
        for (const Example& e : unlabeled->examples) texts.push_back(e.joined_text());
    }
    std::vector<std::string> required;
    auto add_words = [&](const std::string& text) {
        for (std::string& w : split_words(text)) required.push_back(std::move(w));
    };
    for (const std::string& name : train.class_names) add_words(name);
    std::vector<ManualVerbalizer> manual_words;
    std::vector<Template> templates = variant_templates(c, c.hyper.seeds.front(), train, &manual_words);
    templates.push_back(continuous_template(train.task, 1, "anchor"));
    for (const Template& t : templates) {
        for (const Segment& s : t.segments) {
            if (s.kind == Segment::Kind::literal) add_words(s.text);
        }
    }
    for (const ManualVerbalizer& v : manual_words) {
        for (const std::string& w : v.label_words) required.push_back(w);
    }
    if (train.name != "marker" && c.variant == Variant::manual) {
        for (const ManualVerbalizer& v : manual_verbalizers(train.name)) {
            for (const std::string& w : v.label_words) required.push_back(w);
        }
    }
    std::sort(required.begin(), required.end());
    required.erase(std::unique(required.begin(), required.end()), required.end());
    if (required.size() + 3 > c.backbone.vocab_size) throw PipelineError("vocab_size too small for prompt words");
    Vocabulary v = Vocabulary::build(texts, c.backbone.vocab_size - required.size());
    for (const std::string& w : required) v.add(w);
    return v;
}

std::vector<LabelerModel> build_labelers(const RunConfig& c, std::uint64_t seed, const Dataset& train,
                                         const Vocabulary& vocab) {
    std::vector<ManualVerbalizer> manual_words;
    std::vector<Template> templates = variant_templates(c, seed, train, &manual_words);
    const VerbalizerKind kind = verbalizer_kind(c);
    std::vector<LabelerModel> out;
    for (std::size_t i = 0; i < templates.size(); ++i) {
        const std::uint64_t labeler_seed = mix_seed(seed, 0x1AB0 + i);
        BackboneConfig cfg = c.backbone;
        cfg.seed = mix_seed(labeler_seed, 0xBB);
        auto backbone = make_masked_lm(cfg, vocab);
        const Vocabulary& model_vocab = backbone->vocabulary();
        const std::size_t d = backbone->config().d_model;
        std::unique_ptr<Verbalizer> verbalizer;
        switch (kind) {
            case VerbalizerKind::manual: {
                ManualVerbalizer words = i < manual_words.size() ? manual_words[i] : class_name_words(train.class_names);
                verbalizer = std::make_unique<ManualLabelVerbalizer>(std::move(words), model_vocab);
                break;
            }
            case VerbalizerKind::prototypical:
                verbalizer = std::make_unique<PrototypicalVerbalizer>(
                    init_prototypes(train.num_classes(), d, mix_seed(labeler_seed, 0xC0), c.verbalizer.temperature),
                    c.verbalizer.normalizer);
                break;
            case VerbalizerKind::soft:
                verbalizer = std::make_unique<SoftVerbalizer>(
                    SoftVerbalizer::init(train.num_classes(), d, mix_seed(labeler_seed, 0xC1)));
                break;
            case VerbalizerKind::search:
                verbalizer = std::make_unique<SearchVerbalizer>(class_name_words(train.class_names), model_vocab,
                                                                c.verbalizer.search_k);
                break;
        }
        std::optional<Example> demo;
        if (templates[i].has_demo()) {
            const std::size_t id = templates[i].demo_source_ids.at(0);
            auto it = std::find_if(train.examples.begin(), train.examples.end(),
                                   [&](const Example& e) { return e.id == id; });
            if (it == train.examples.end()) throw PipelineError("demonstration example not in the training set");
            demo = *it;
        }
        out.push_back(make_labeler(std::move(backbone), templates[i], std::move(demo), std::move(verbalizer),
                                   train.class_names, c.hyper, labeler_seed));
    }
    return out;
}

void prepare_seed_dir(const RunConfig& c, std::uint64_t seed, const SourceData& data) {
    const fs::path dir = seed_dir(c.run_dir, seed);
    fs::create_directories(dir / "splits");
    const Dataset train = sample_few_shot(data.pool, FewShotSpec{c.few_shot_mode, c.k, seed});
    std::optional<Dataset> unlabeled;
    if (uses_unlabeled(c.variant)) {
        const Dataset base = data.unlabeled ? *data.unlabeled : residual(data.pool, train);
        unlabeled = strip_labels(base, c.dataset.unlabeled_size.value_or(base.size()), seed);
        if (unlabeled->empty()) throw PipelineError("unlabeled set is empty");
    }
    write_metadata(dir / "splits" / "metadata.json", train);
    write_dataset(dir / "splits" / "train.jsonl", train);
    if (unlabeled) write_dataset(dir / "splits" / "unlabeled.jsonl", *unlabeled);
    write_dataset(dir / "splits" / "test.jsonl", data.test);

    RunConfig snap = c;
    snap.hyper.seeds = {seed};
    if (!snap.dataset.dir.empty()) snap.dataset.dir = fs::absolute(snap.dataset.dir);
    write_text_file(dir / "config.snapshot", to_json(snap).dump(2) + "\n");
    build_vocabulary(snap, train, unlabeled ? &*unlabeled : nullptr).save(dir / "vocab.txt");
}

std::size_t stage_train_labelers(const fs::path& dir) {
    const SeedContext ctx = open_seed_dir(dir);
    if (!uses_labelers(ctx.config.variant)) return 0;
    const Dataset train = load_split(dir, "train", DatasetKind::labeled);
    const Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
    std::vector<LabelerModel> labelers = build_labelers(ctx.config, ctx.seed, train, vocab);
    fs::remove_all(dir / "labelers");
    parallel_for(labelers.size(), ctx.config.workers, [&](std::size_t i) {
        LabelerModel trained = train_labeler(std::move(labelers[i]), train, ctx.config.hyper);
        trained.save(dir / "labelers" / std::to_string(i));
    });
    return labelers.size();
}

void stage_soft_label(const fs::path& dir) {
    const SeedContext ctx = open_seed_dir(dir);
    if (!uses_unlabeled(ctx.config.variant)) return;
    std::vector<LabelerModel> labelers;
    for (const fs::path& p : labeler_dirs(dir)) labelers.push_back(LabelerModel::load(p));
    if (labelers.empty()) throw PipelineError("no trained labelers in " + dir.string());
    const Dataset u = load_split(dir, "unlabeled", DatasetKind::unlabeled);
    const SoftLabelSet s = soft_label(labelers, u, ctx.config.workers);
    s.validate(ctx.labeled.class_names.size());
    save_soft_labels(dir / "soft_labels.jsonl", s);
}

void stage_distill(const fs::path& dir) {
    const SeedContext ctx = open_seed_dir(dir);
    const Variant v = ctx.config.variant;
    if (v == Variant::demo_soft_sl) return;
    BackboneConfig cfg = ctx.config.backbone;
    cfg.seed = mix_seed(ctx.seed, 0xF1A1);
    auto model = make_classifier(cfg, Vocabulary::load(dir / "vocab.txt"), ctx.labeled.class_names.size());
    TrainingRecord record;
    if (v == Variant::finetune) {
        fine_tune(*model, load_split(dir, "train", DatasetKind::labeled), ctx.config.hyper, ctx.seed, &record);
    } else {
        if (!fs::exists(dir / "soft_labels.jsonl")) throw PipelineError("no soft labels in " + dir.string());
        distill(*model, load_soft_labels(dir / "soft_labels.jsonl"), load_split(dir, "unlabeled", DatasetKind::unlabeled),
                ctx.config.hyper, ctx.seed, &record);
    }
    fs::remove_all(dir / "final");
    fs::create_directories(dir / "final");
    model->save(dir / "final");
    write_text_file(dir / "final" / "training.json", to_json(record).dump(2) + "\n");
}

SeedResult stage_evaluate(const fs::path& dir, const fs::path& test_path) {
    const SeedContext ctx = open_seed_dir(dir);
    const Dataset test = load_dataset(test_path, load_metadata(dir / "splits" / "metadata.json", DatasetKind::test));
    SeedResult result;
    result.seed = ctx.seed;
    const std::vector<fs::path> labelers = labeler_dirs(dir);
    result.labelers = labelers.size();
    for (const fs::path& p : labelers) {
        const json meta = json::parse(read_text_file(p / "labeler.json"));
        for (const std::string& f : training_record_from_json(meta.at("training")).flags) {
            result.flags.push_back("labeler " + p.filename().string() + ": " + f);
        }
    }
    if (ctx.config.variant == Variant::demo_soft_sl) {
        if (labelers.empty()) throw PipelineError("no trained labeler in " + dir.string());
        LabelerModel m = LabelerModel::load(labelers.front());
        result.accuracy = predict_labeler(m, test).accuracy;
    } else {
        if (!fs::exists(dir / "final" / "manifest.json")) throw PipelineError("no final classifier in " + dir.string());
        auto model = load_classifier(dir / "final");
        result.accuracy = predict_final(*model, test).accuracy;
        if (fs::exists(dir / "final" / "training.json")) {
            for (const std::string& f :
                 training_record_from_json(json::parse(read_text_file(dir / "final" / "training.json"))).flags) {
                result.flags.push_back("final: " + f);
            }
        }
    }
    const SeedResult one[] = {result};
    const RunReport r = make_run_report(ctx.config, ctx.labeled.name, ctx.labeled.task, one);
    write_text_file(dir / "report.json", to_json(r).dump(2) + "\n");
    return result;
}

SeedResult run_seed(const RunConfig& c, std::uint64_t seed, const SourceData& data) {
    const fs::path dir = seed_dir(c.run_dir, seed);
    fs::remove_all(dir);
    prepare_seed_dir(c, seed, data);
    stage_train_labelers(dir);
    stage_soft_label(dir);
    stage_distill(dir);
    return stage_evaluate(dir, dir / "splits" / "test.jsonl");
}

RunReport run_pet(const RunConfig& c) {
    c.validate();
    const SourceData data = load_source(c.dataset);
    if (uses_unlabeled(c.variant) && !data.unlabeled && data.pool.size() <= static_cast<std::size_t>(c.k)) {
        throw PipelineError("no unlabeled data available");
    }
    fs::create_directories(c.run_dir);
    write_text_file(c.run_dir / "config.snapshot", to_json(c).dump(2) + "\n");
    std::vector<SeedResult> results;
    for (std::uint64_t seed : c.hyper.seeds) results.push_back(run_seed(c, seed, data));
    const RunReport r = make_run_report(c, data.pool.name, data.pool.task, results);
    write_text_file(c.run_dir / "report.json", to_json(r).dump(2) + "\n");
    return r;
}

RunReport aggregate_run(const fs::path& run_dir) {
    std::vector<RunReport> parts;
    for (const fs::path& dir : seed_dirs(run_dir)) {
        if (!fs::exists(dir / "report.json")) throw PipelineError("no report.json in " + dir.string());
        parts.push_back(run_report_from_json(json::parse(read_text_file(dir / "report.json"))));
    }
    RunReport r = parts.front();
    r.seeds.clear();
    r.per_seed_acc.clear();
    r.flags.clear();
    double sum = 0.0;
    for (const RunReport& p : parts) {
        if (p.variant != r.variant || p.dataset != r.dataset || p.k != r.k) {
            throw PipelineError("seed reports under " + run_dir.string() + " describe different runs");
        }
        r.seeds.insert(r.seeds.end(), p.seeds.begin(), p.seeds.end());
        r.per_seed_acc.insert(r.per_seed_acc.end(), p.per_seed_acc.begin(), p.per_seed_acc.end());
        r.flags.insert(r.flags.end(), p.flags.begin(), p.flags.end());
    }
    for (double a : r.per_seed_acc) sum += a;
    r.mean_acc = sum / static_cast<double>(r.per_seed_acc.size());
    if (seed_dirs(run_dir).front() != run_dir) write_text_file(run_dir / "report.json", to_json(r).dump(2) + "\n");
    return r;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t failed_index = n;
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (i < failed_index) {
                        failed_index = i;
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace prompt_pet
