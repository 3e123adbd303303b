#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>

#include "prompt_pet/autograd.hpp"

namespace prompt_pet {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Moment buffers are keyed by parameter
// address, so the optimizer must not outlive the parameters it updates.
class AdamW {
public:
    explicit AdamW(AdamWOptions options = {}) : options_(options) {}

    // Applies one update with learning rate `lr` to every parameter in
    // `params`, reading Parameter::grad (an empty grad counts as zero).
    // Throws std::invalid_argument on a grad/value shape mismatch and
    // std::domain_error on a non-finite gradient; in both cases no
    // parameter is modified.
    void step(std::span<Parameter* const> params, double lr);

    std::size_t steps_taken() const { return step_; }
    const AdamWOptions& options() const { return options_; }

private:
    struct Moments {
        Matrix m;
        Matrix v;
    };
    AdamWOptions options_;
    std::size_t step_ = 0;
    std::unordered_map<const Parameter*, Moments> moments_;
};

enum class Schedule { linear, constant };

Schedule parse_schedule(const std::string& name);
std::string to_string(Schedule s);

// Learning rate for update `step` (0-based) of `total_steps`; linear decays
// to zero at the end of training without warmup.
double scheduled_lr(Schedule s, double base_lr, std::size_t step, std::size_t total_steps);

}  // namespace prompt_pet
