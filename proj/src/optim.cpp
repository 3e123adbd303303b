#include "prompt_pet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace prompt_pet {

void AdamW::step(std::span<Parameter* const> params, double lr) {
    for (const Parameter* p : params) {
        if (p->grad.empty()) {
            continue;
        }
        if (!p->grad.same_shape(p->value)) {
            throw std::invalid_argument("gradient shape does not match parameter " + p->name);
        }
        if (!p->grad.all_finite()) {
            throw std::domain_error("non-finite gradient for parameter " + p->name);
        }
    }
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (Parameter* p : params) {
        auto value = p->value.values();
        if (options_.weight_decay != 0.0) {
            const double keep = 1.0 - lr * options_.weight_decay;
            for (double& x : value) x *= keep;
        }
        if (p->grad.empty()) {
            // Zero gradient: moments still decay, so the update is driven by history.
            auto it = moments_.find(p);
            if (it == moments_.end()) continue;
        }
        Moments& mo = moments_[p];
        if (!mo.m.same_shape(p->value)) {
            mo.m = Matrix(p->value.rows(), p->value.cols());
            mo.v = Matrix(p->value.rows(), p->value.cols());
        }
        auto m = mo.m.values();
        auto v = mo.v.values();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = p->grad.empty() ? 0.0 : p->grad.values()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            value[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
        }
    }
}

Schedule parse_schedule(const std::string& name) {
    if (name == "linear") return Schedule::linear;
    if (name == "constant") return Schedule::constant;
    throw std::invalid_argument("unknown schedule: " + name);
}

std::string to_string(Schedule s) { return s == Schedule::linear ? "linear" : "constant"; }

double scheduled_lr(Schedule s, double base_lr, std::size_t step, std::size_t total_steps) {
    if (s == Schedule::constant || total_steps == 0) {
        return base_lr;
    }
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * std::max(0.0, 1.0 - frac);
}

}  // namespace prompt_pet
