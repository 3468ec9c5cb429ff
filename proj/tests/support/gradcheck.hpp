#pragma once

// Central-difference gradient verification, independent of the autodiff path:
// perturbs raw leaf values and re-runs the forward closure.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dbrn/autodiff/variable.hpp"

namespace dbrn::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
    std::string worst;
};

// f: builds a fresh scalar graph from the current leaf values.
inline GradCheckResult gradcheck(const std::function<dbrn::Var<double>()>& f,
                                 const std::vector<dbrn::Var<double>>& leaves, double h = 1e-5) {
    using dbrn::backward;
    for (const auto& l : leaves) l.zero_grad();
    auto loss = f();
    backward(loss);

    GradCheckResult res;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = const_cast<dbrn::Var<double>&>(leaves[li]);
        const auto analytic = leaf.grad(); // copy
        for (int64_t i = 0; i < leaf.numel(); ++i) {
            const double orig = leaf.val()[i];
            leaf.val()[i] = orig + h;
            const double fp = f().val()[0];
            leaf.val()[i] = orig - h;
            const double fm = f().val()[0];
            leaf.val()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i];
            const double denom = std::max(1.0, std::max(std::abs(a), std::abs(numeric)));
            const double rel = std::abs(a - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "leaf " + std::to_string(li) + " idx " + std::to_string(i) + " analytic " +
                            std::to_string(a) + " numeric " + std::to_string(numeric);
            }
            ++res.checked;
        }
    }
    return res;
}

} // namespace dbrn::testing
