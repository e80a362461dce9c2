#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "finedeep/tensor.hpp"

namespace finedeep {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = true;
    std::string worst_param;
    std::size_t worst_index = 0;
};

// Central-difference check of analytic gradients.
//   f         : evaluates the scalar loss at the current parameter values
//   params    : parameter tensors f reads (perturbed in place)
//   grads     : analytic gradient per parameter, same order
// Relative error denominator is max(|analytic|, |numeric|, floor). The floor
// matters: central differences on a loss of order 1 carry roundoff noise of
// about eps/(2h) ≈ 1e-11 at h = 1e-5, so gradients far below the floor can
// only be checked absolutely, not relatively.
inline GradCheckReport finite_diff_check(const std::function<double()>& f,
                                         const std::vector<std::pair<std::string, Tensor*>>& params,
                                         const std::vector<const Tensor*>& grads,
                                         double h = 1e-5, double tol = 1e-4,
                                         double floor = 1e-6) {
    if (h <= 0.0) throw InputError("finite_diff_check: h must be positive");
    GradCheckReport rep;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p].second;
        const Tensor& g = *grads[p];
        for (std::size_t i = 0; i < theta.data.size(); ++i) {
            const double orig = theta.data[i];
            theta.data[i] = orig + h;
            const double fp = f();
            theta.data[i] = orig - h;
            const double fm = f();
            theta.data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = g.data[i];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
            const double rel = std::fabs(analytic - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = params[p].first;
                rep.worst_index = i;
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

}  // namespace finedeep
