#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "depthprune/errors.hpp"
#include "depthprune/tensor.hpp"

namespace depthprune {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const std::vector<Tensor>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// Parameters with no accumulated gradient are treated as having zero gradient.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            auto w = p.data();
            const bool has = p.has_grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g = has ? p.grad()[i] : 0.0;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
            }
        }
    }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

/// Scales gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-12);
        for (auto& p : params)
            if (p.has_grad())
                for (double& g : p.grad()) g *= s;
    }
    return norm;
}

/// Exponential moving average of a parameter list.
class Ema {
public:
    Ema(const std::vector<Tensor>& params, double decay) : decay_(decay) {
        if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("EMA decay must be in [0, 1)");
        for (const auto& p : params) shadow_.push_back(p.values());
    }

    void update(const std::vector<Tensor>& params) {
        for (std::size_t k = 0; k < params.size(); ++k) {
            const auto w = params[k].data();
            auto& s = shadow_[k];
            for (std::size_t i = 0; i < w.size(); ++i) s[i] = decay_ * s[i] + (1.0 - decay_) * w[i];
        }
    }

    void copy_to(std::vector<Tensor>& params) const {
        for (std::size_t k = 0; k < params.size(); ++k) params[k].values() = shadow_[k];
    }

    double decay() const { return decay_; }
    const std::vector<std::vector<double>>& shadow() const { return shadow_; }

private:
    double decay_;
    std::vector<std::vector<double>> shadow_;
};

/// Learning rate halved at `halvings` evenly spaced milestones over `total` steps (step is 1-based).
inline double halving_lr(double base, std::size_t step, std::size_t total, std::size_t halvings) {
    if (total == 0 || halvings == 0) return base;
    const std::size_t interval = std::max<std::size_t>(1, total / (halvings + 1));
    const std::size_t done = std::min(halvings, (step > 0 ? step - 1 : 0) / interval);
    return base * std::ldexp(1.0, -static_cast<int>(done));
}

}  // namespace depthprune
