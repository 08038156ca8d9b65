#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qalens/autograd.hpp"
#include "qalens/errors.hpp"
#include "qalens/rng.hpp"

namespace qalens {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t n_checked = 0;
    bool passed = false;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Compares analytic gradients against central finite differences on a random
// subset of weight entries. `loss_with_grads` must be deterministic (dropout
// off), return the scalar loss, and accumulate gradients into the Parameters.
inline GradCheckReport gradient_check(const std::function<double()>& loss_with_grads,
                                      const std::vector<Parameter*>& params, double step,
                                      double tolerance, std::size_t n_samples, RngState rng) {
    for (Parameter* p : params) p->zero_grad();
    const double base = loss_with_grads();
    if (!std::isfinite(base)) throw NumericError("gradient_check: non-finite loss");

    std::vector<Matrix> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    std::size_t total = 0;
    for (Parameter* p : params) total += p->value.data.size();

    GradCheckReport report;
    for (std::size_t s = 0; s < n_samples; ++s) {
        std::size_t pick = rng.next_below(total);
        std::size_t pi = 0;
        while (pick >= params[pi]->value.data.size()) {
            pick -= params[pi]->value.data.size();
            ++pi;
        }
        double& w = params[pi]->value.data[pick];
        const double saved = w;
        w = saved + step;
        for (Parameter* p : params) p->zero_grad();
        const double lp = loss_with_grads();
        w = saved - step;
        for (Parameter* p : params) p->zero_grad();
        const double lm = loss_with_grads();
        w = saved;
        if (!std::isfinite(lp) || !std::isfinite(lm)) {
            throw NumericError("gradient_check: non-finite loss at perturbed point");
        }
        const double numeric = (lp - lm) / (2.0 * step);
        const double a = analytic[pi].data[pick];
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = params[pi]->name;
            report.worst_index = pick;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
        ++report.n_checked;
    }
    for (Parameter* p : params) p->zero_grad();
    report.passed = report.max_rel_error <= tolerance;
    return report;
}

}  // namespace qalens
