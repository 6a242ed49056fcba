// Central-difference verification of autodiff gradients.
#pragma once

#include <cstdio>
#include <functional>
#include <string>

#include "emseg/tensor.hpp"

namespace emseg {

struct FdReport {
    double max_rel_err = 0.0;
    int worst_input = -1;
    int64_t worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    bool passed = true;

    std::string summary() const {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "max rel err %.3e at input %d coord %lld (analytic %.6e, numeric %.6e)",
                      max_rel_err, worst_input, static_cast<long long>(worst_coord), analytic,
                      numeric);
        return buf;
    }
};

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max(1e-8, std::fabs(a) + std::fabs(b));
}

// Compares the taped gradient of f() against central differences for the
// coordinates of every listed input. f must rebuild its graph from the
// inputs' current values on each call and return a scalar. corrupt_grads,
// when set, runs between backward and comparison; it exists so a planted
// gradient bug can demonstrate that the checker catches one. When
// max_coords_per_input > 0, at most that many coordinates per input are
// probed (a deterministic seeded sample), which keeps wide models tractable.
template <class R, class F>
FdReport check_gradients(F&& f, std::vector<Tensor<R>> inputs, double step = 1e-3,
                         double tol = 1e-4, const std::function<void()>& corrupt_grads = {},
                         int64_t max_coords_per_input = 0, uint64_t sample_seed = 12345) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    {
        Tape<R> tape;
        Tensor<R> loss = f();
        tape.backward(loss);
    }
    if (corrupt_grads) corrupt_grads();

    FdReport report;
    NoGradGuard ng;
    Rng sampler(sample_seed);
    for (size_t which = 0; which < inputs.size(); ++which) {
        Tensor<R>& t = inputs[which];
        std::vector<int64_t> coords;
        if (max_coords_per_input > 0 && t.numel() > max_coords_per_input) {
            std::vector<int64_t> all(static_cast<size_t>(t.numel()));
            for (int64_t i = 0; i < t.numel(); ++i) all[static_cast<size_t>(i)] = i;
            sampler.shuffle(all);
            coords.assign(all.begin(), all.begin() + max_coords_per_input);
        } else {
            coords.resize(static_cast<size_t>(t.numel()));
            for (int64_t i = 0; i < t.numel(); ++i) coords[static_cast<size_t>(i)] = i;
        }
        for (int64_t i : coords) {
            R saved = t.data()[i];
            t.data()[i] = saved + static_cast<R>(step);
            double fp = static_cast<double>(f().item());
            t.data()[i] = saved - static_cast<R>(step);
            double fm = static_cast<double>(f().item());
            t.data()[i] = saved;
            double numeric = (fp - fm) / (2.0 * step);
            double analytic = static_cast<double>(t.grad()[i]);
            double e = rel_err(analytic, numeric);
            if (e > report.max_rel_err) {
                report.max_rel_err = e;
                report.worst_input = static_cast<int>(which);
                report.worst_coord = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    return report;
}

// Single-input convenience wrapper.
template <class R, class F>
FdReport finite_difference_check(F&& f, Tensor<R> x, double step = 1e-3, double tol = 1e-4) {
    return check_gradients<R>(std::forward<F>(f), {x}, step, tol);
}

}  // namespace emseg
