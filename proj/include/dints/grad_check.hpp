#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dints/autodiff.hpp"

namespace dints::ad {

struct GradCheckOptions {
    double h = 1e-5;
    double tol = 1e-5;
    // Components smaller than floor_ratio * max|numeric| are compared against
    // that floor instead of their own magnitude.
    double floor_ratio = 1e-3;
    // 0 checks every element; otherwise an evenly strided subset per input.
    std::size_t max_checks_per_input = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
    bool passed = true;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, GradCheckOptions opt = {})
{
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const Tensor& in : inputs) vars.push_back(tape.param(in));
        Var y = f(tape, vars);
        tape.backward(y);
        for (const Var& v : vars) analytic.push_back(tape.grad(v));
    }

    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape tape;
        std::vector<Var> vars;
        for (const Tensor& in : xs) vars.push_back(tape.constant(in));
        return f(tape, vars).value().item();
    };

    struct Probe {
        std::size_t input, index;
        double numeric;
    };
    std::vector<Probe> probes;
    std::vector<Tensor> work = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t n = inputs[k].size();
        const std::size_t stride =
            (opt.max_checks_per_input == 0 || n <= opt.max_checks_per_input) ? 1 : n / opt.max_checks_per_input;
        for (std::size_t i = 0; i < n; i += stride) {
            const double x0 = work[k].data[i];
            work[k].data[i] = x0 + opt.h;
            const double fp = eval(work);
            work[k].data[i] = x0 - opt.h;
            const double fm = eval(work);
            work[k].data[i] = x0;
            probes.push_back({k, i, (fp - fm) / (2.0 * opt.h)});
        }
    }

    double scale = 0.0;
    for (const Probe& p : probes) scale = std::max(scale, std::fabs(p.numeric));
    const double floor = std::max(opt.floor_ratio * scale, std::numeric_limits<double>::min());

    GradCheckReport rep;
    for (const Probe& p : probes) {
        const double a = analytic[p.input].data[p.index];
        const double denom = std::max({std::fabs(a), std::fabs(p.numeric), floor});
        const double err = std::fabs(a - p.numeric) / denom;
        ++rep.checked;
        if (std::isnan(rep.max_rel_error)) continue;
        if (std::isnan(err) || err > rep.max_rel_error) {
            rep.max_rel_error = err;
            rep.worst_input = p.input;
            rep.worst_index = p.index;
            rep.analytic = a;
            rep.numeric = p.numeric;
        }
    }
    rep.passed = !std::isnan(rep.max_rel_error) && rep.max_rel_error <= opt.tol;
    return rep;
}

} // namespace dints::ad
