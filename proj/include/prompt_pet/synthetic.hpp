#pragma once

#include <cstdint>

#include "prompt_pet/corpus.hpp"

namespace prompt_pet {

// Marker-token classification data: each text_a is a run of noise words
// with exactly one class marker word inserted at a random position, and the
// marker alone determines the label.
struct MarkerDataOptions {
    std::size_t num_classes = 2;
    std::size_t noise_vocabulary = 40;
    std::size_t min_noise = 4;
    std::size_t max_noise = 8;
    std::uint64_t seed = 0;
};

std::vector<std::string> marker_class_names(std::size_t num_classes);
std::string marker_word(std::size_t cls);

Dataset make_marker_dataset(std::size_t size, DatasetKind kind, const MarkerDataOptions& opts,
                            std::size_t first_id = 0);

}  // namespace prompt_pet
