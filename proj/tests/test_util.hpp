#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "prompt_pet/autograd.hpp"
#include "prompt_pet/random.hpp"

namespace testutil {

using prompt_pet::Graph;
using prompt_pet::Matrix;
using prompt_pet::Parameter;
using prompt_pet::Var;

// Fresh scratch directory under the build tree, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() /
                ("prompt_pet_" + tag + "_" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

// Compares analytic gradients of a scalar loss with central differences
// for every entry of every parameter. Relative error is
// |a - n| / max(|a|, |n|, floor).
inline GradCheck grad_check(const std::function<Var(Graph&)>& loss, std::span<Parameter* const> params,
                            double eps = 1e-4, double floor = 1e-6) {
    for (Parameter* p : params) p->zero_grad();
    {
        Graph g(true);
        g.backward(loss(g));
    }
    auto eval = [&] {
        Graph g(false);
        return loss(g).value()(0, 0);
    };
    GradCheck out;
    for (Parameter* p : params) {
        const Matrix analytic = p->grad.empty() ? Matrix(p->value.rows(), p->value.cols()) : p->grad;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double& x = p->value.values()[i];
            const double saved = x;
            x = saved + eps;
            const double up = eval();
            x = saved - eps;
            const double down = eval();
            x = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic.values()[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
            ++out.checked;
        }
    }
    return out;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
    prompt_pet::Rng rng(seed);
    return prompt_pet::normal_matrix(r, c, scale, rng);
}

}  // namespace testutil
