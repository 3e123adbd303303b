#include "prompt_pet/synthetic.hpp"

#include <random>

#include "prompt_pet/random.hpp"

namespace prompt_pet {

std::vector<std::string> marker_class_names(std::size_t num_classes) {
    static const char* kNames[] = {"alpha", "beta", "gamma", "delta", "epsilon",
                                   "zeta",  "eta",  "theta", "iota",  "kappa"};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < num_classes; ++i) {
        out.push_back(i < std::size(kNames) ? kNames[i] : "class" + std::to_string(i));
    }
    return out;
}

std::string marker_word(std::size_t cls) { return "marker" + std::to_string(cls); }

Dataset make_marker_dataset(std::size_t size, DatasetKind kind, const MarkerDataOptions& opts,
                            std::size_t first_id) {
    Dataset d;
    d.name = "marker";
    d.task = Task::TC;
    d.class_names = marker_class_names(opts.num_classes);
    d.kind = kind;
    Rng rng(mix_seed(opts.seed, 0x3A7));
    std::uniform_int_distribution<std::size_t> cls_dist(0, opts.num_classes - 1);
    std::uniform_int_distribution<std::size_t> len_dist(opts.min_noise, opts.max_noise);
    std::uniform_int_distribution<std::size_t> word_dist(0, opts.noise_vocabulary - 1);
    for (std::size_t i = 0; i < size; ++i) {
        const std::size_t cls = cls_dist(rng);
        const std::size_t n = len_dist(rng);
        std::vector<std::string> words;
        for (std::size_t w = 0; w < n; ++w) words.push_back("w" + std::to_string(word_dist(rng)));
        std::uniform_int_distribution<std::size_t> pos_dist(0, n);
        words.insert(words.begin() + static_cast<long>(pos_dist(rng)), marker_word(cls));
        Example e;
        e.id = first_id + i;
        for (std::size_t w = 0; w < words.size(); ++w) {
            if (w) e.text_a += ' ';
            e.text_a += words[w];
        }
        if (kind != DatasetKind::unlabeled) e.label = cls;
        d.examples.push_back(std::move(e));
    }
    return d;
}

}  // namespace prompt_pet
