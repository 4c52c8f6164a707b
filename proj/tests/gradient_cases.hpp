#pragma once
// Operation cases and tape-vs-central-difference comparisons shared by the unit and acceptance tests.

#include <functional>

#include "depthprune/ops.hpp"
#include "depthprune/rng.hpp"
#include "depthprune/toy_dit.hpp"
#include "oracles.hpp"

namespace gradient_cases {

using namespace depthprune;

inline Tensor randn(Shape s, Rng& rng, double sd = 1.0, double mean = 0.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data()) v = rng.normal(mean, sd);
    return t;
}

// Scalarizes y with a fixed random projection so the whole Jacobian is exercised.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
    Rng r(seed);
    return sum(mul(y, randn(y.shape(), r)));
}

// Tape gradient vs. an independent central difference, max |a - n| / max(1, |a|).
inline double tape_vs_fd(const std::function<Tensor(const Tensor&)>& f, const Tensor& point) {
    Tensor x = point.detach();
    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        tape.backward(f(x));
        analytic.assign(x.grad().begin(), x.grad().end());
    }
    const Shape shape = point.shape();
    auto plain = [&](const std::vector<double>& v) {
        NoGradGuard ng;
        return f(Tensor::from(shape, v)).item();
    };
    const auto numeric = oracle::fd_gradient(plain, point.values());
    double worst = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i)
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i])));
    return worst;
}

struct OpCase {
    const char* name;
    Shape shape;
    std::function<Tensor(const Tensor&)> f;
    double mean = 0.0;  // evaluation point ~ N(mean, sd)
    double sd = 1.0;
};

inline std::vector<OpCase> op_cases() {
    Rng r(77);
    const Tensor other = randn({3, 4}, r);
    const Tensor row = randn({4}, r);
    const Tensor w = randn({5, 4}, r);
    const Tensor bias = randn({5}, r);
    const Tensor rhs = randn({4, 2}, r);
    const Tensor b3 = randn({2, 4, 3}, r);
    const Tensor gain = randn({4}, r, 0.5, 1.0);
    const Tensor branch = randn({3, 4}, r);
    const Tensor mval = Tensor::scalar(0.3);
    return {
        {"add", {3, 4}, [=](const Tensor& x) { return project(add(x, other), 1); }},
        {"add_broadcast_small", {4}, [=](const Tensor& x) { return project(add(other, x), 2); }},
        {"sub", {3, 4}, [=](const Tensor& x) { return project(sub(other, x), 3); }},
        {"mul", {3, 4}, [=](const Tensor& x) { return project(mul(x, x), 5); }},
        {"mul_broadcast", {4}, [=](const Tensor& x) { return project(mul(other, x), 6); }},
        {"scale", {3, 4}, [=](const Tensor& x) { return project(scale(x, -1.7), 7); }},
        {"gelu", {3, 4}, [=](const Tensor& x) { return project(gelu(x), 8); }},
        {"exp", {3, 4}, [=](const Tensor& x) { return project(exp(x), 9); }},
        {"log", {3, 4}, [=](const Tensor& x) { return project(log(x), 10); }, 3.0, 0.4},
        {"square", {3, 4}, [=](const Tensor& x) { return project(square(x), 11); }},
        {"sum", {3, 4}, [=](const Tensor& x) { return scale(sum(x), 0.3); }},
        {"mean", {3, 4}, [=](const Tensor& x) { return mean(square(x)); }},
        {"mean_axis", {2, 3, 4}, [=](const Tensor& x) { return project(mean_axis(x, 1), 12); }},
        {"mse", {3, 4}, [=](const Tensor& x) { return mse(x, other); }},
        {"masked_mse", {3, 4}, [=](const Tensor& x) {
             std::vector<bool> keep(12, true);
             keep[1] = keep[7] = false;
             return masked_mse(other, x, keep);
         }},
        {"matmul_lhs", {3, 4}, [=](const Tensor& x) { return project(matmul(x, rhs), 13); }},
        {"matmul_rhs", {4, 2}, [=](const Tensor& x) { return project(matmul(other, x), 14); }},
        {"linear_x", {2, 3, 4}, [=](const Tensor& x) { return project(linear(x, w, bias), 15); }},
        {"linear_w", {5, 4}, [=](const Tensor& x) { return project(linear(other, x, bias), 16); }},
        {"linear_b", {5}, [=](const Tensor& x) { return project(linear(other, w, x), 17); }},
        {"bmm", {2, 3, 4}, [=](const Tensor& x) { return project(bmm(x, b3), 18); }},
        {"bmm_transposed", {2, 3, 3}, [=](const Tensor& x) { return project(bmm(x, x, true), 19); }},
        {"reshape", {3, 4}, [=](const Tensor& x) { return project(square(reshape(x, {2, 6})), 20); }},
        {"permute", {2, 3, 4}, [=](const Tensor& x) { return project(square(permute(x, {2, 0, 1})), 21); }},
        {"gather_rows", {3, 4}, [=](const Tensor& x) { return project(gather_rows(x, {2, 0, 2, 1}), 22); }},
        {"select", {3, 4}, [=](const Tensor& x) { return mul(select(x, 5), select(x, 6)); }},
        {"softmax_last", {3, 4}, [=](const Tensor& x) { return project(softmax(x, 1), 23); }},
        {"softmax_middle", {2, 3, 4}, [=](const Tensor& x) { return project(softmax(x, 1), 24); }},
        {"log_softmax", {3, 4}, [=](const Tensor& x) { return project(log_softmax(x), 25); }},
        {"layernorm_x", {3, 4}, [=](const Tensor& x) { return project(layernorm(x, gain, row), 26); }},
        {"layernorm_gain", {4}, [=](const Tensor& x) { return project(layernorm(other, x, row), 27); }},
        {"layernorm_bias", {4}, [=](const Tensor& x) { return project(layernorm(other, gain, x), 28); }},
        {"gate_branch", {3, 4}, [=](const Tensor& x) { return project(gate(x, other, mval, 0.3), 29); }},
        {"gate_skip", {3, 4}, [=](const Tensor& x) { return project(gate(branch, x, mval, 0.3), 30); }},
        {"gate_value", {1}, [=](const Tensor& x) { return project(gate(branch, other, x, x.item()), 31); }, 0.5, 0.1},
    };
}

/// Worst relative error of the diffusion-loss gradient over every parameter element.
inline double diffusion_loss_vs_fd(ToyDiTModel& model, const Batch& b, std::string* worst_name = nullptr) {
    for (auto& t : model.parameters()) t.zero_grad();
    {
        Tape tape;
        tape.backward(diffusion_loss(model, b));
    }
    double worst = 0;
    for (auto [name, p] : model.named_parameters()) {
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        const std::vector<double> saved = p.values();
        auto plain = [&](const std::vector<double>& v) {
            p.values() = v;
            NoGradGuard ng;
            return diffusion_loss(model, b).item();
        };
        const auto numeric = oracle::fd_gradient(plain, saved);
        p.values() = saved;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            const double e = std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i]));
            if (e > worst) {
                worst = e;
                if (worst_name) *worst_name = name;
            }
        }
    }
    return worst;
}

}  // namespace gradient_cases
