#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "depthprune/tensor.hpp"

namespace depthprune {

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool finite = true;  // false if f was non-finite at any perturbed point

    bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Compares the taped gradient of a scalar function against central differences.
///
/// `f` receives a tensor that requires a gradient and must return a [1] tensor.
/// The error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                  double h = 1e-5) {
    GradCheckResult res;
    Tensor x = point.detach();
    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(x);
        if (!std::isfinite(y.item())) return {std::numeric_limits<double>::infinity(), false};
        tape.backward(y);
        analytic.assign(x.grad().begin(), x.grad().end());
    }
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = f(x).item();
        x.data()[i] = orig - h;
        const double fm = f(x).item();
        x.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            res.finite = false;
            res.max_rel_error = std::numeric_limits<double>::infinity();
            return res;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        res.max_rel_error = std::max(res.max_rel_error, err);
    }
    return res;
}

}  // namespace depthprune
