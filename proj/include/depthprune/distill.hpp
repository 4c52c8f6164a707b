#pragma once
// Recovery training after pruning: plain fine-tuning and distillation with masked representation matching.

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/mask_sampler.hpp"
#include "depthprune/optim.hpp"
#include "depthprune/toy_dit.hpp"

namespace depthprune {

struct DistillConfig {
    double alpha_kd = 0.9;
    double alpha_diff = 0.1;
    double beta0 = 1e-2;     // representation weight at step 0, decays linearly to 0
    double k = 2.0;          // exclusion threshold in standard deviations
    bool centered = true;    // |x - mu| > k sigma, otherwise |x| > k sigma
    bool union_mask = true;  // exclude on teacher OR student statistics, otherwise teacher only
    std::size_t steps = 5000;
    std::size_t batch = 64;
    double lr = 2e-4;
    std::size_t lr_halvings = 4;
    double ema_decay = 0.999;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha_kd >= 0.0 && alpha_diff >= 0.0 && alpha_kd + alpha_diff > 0.0))
            throw ConfigError("recover.alpha_kd + recover.alpha_diff must be positive");
        if (!(k > 0.0)) throw ConfigError("recover.k must be positive");
        if (beta0 < 0.0) throw ConfigError("recover.beta must be non-negative");
        if (batch == 0) throw ConfigError("recover.batch must be positive");
    }

    /// beta at 1-based step s: beta0 (1 - s / total), so the last step has weight 0.
    double beta(std::size_t step) const {
        if (steps == 0) return 0.0;
        return beta0 * (1.0 - static_cast<double>(step) / static_cast<double>(steps));
    }

    TrainConfig as_train_config() const {
        TrainConfig t;
        t.steps = steps;
        t.batch = batch;
        t.adam.lr = lr;
        t.grad_clip = grad_clip;
        t.ema_decay = ema_decay;
        t.lr_halvings = lr_halvings;
        t.seed = seed;
        return t;
    }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
    j = {{"alpha_kd", c.alpha_kd}, {"alpha_diff", c.alpha_diff}, {"beta", c.beta0},       {"k", c.k},
         {"centered", c.centered}, {"union", c.union_mask},      {"steps", c.steps},      {"batch", c.batch},
         {"lr", c.lr},             {"lr_halvings", c.lr_halvings}, {"ema_decay", c.ema_decay}, {"grad_clip", c.grad_clip},
         {"seed", c.seed}};
}

/// (student layer, teacher layer) pairs; the student's hidden state after its layer is matched to the
/// teacher's hidden state after the teacher layer.
using BlockAlignment = std::vector<std::pair<std::size_t, std::size_t>>;

/// Empty for global (non-blockwise) decisions: representation matching is then unavailable.
inline BlockAlignment block_alignment(std::size_t teacher_depth, const PruneDecision& d) {
    if (d.per_block_choice.empty()) return {};
    if (d.depth != teacher_depth) throw ConfigError("decision depth does not match the teacher");
    const NMScheme& s = d.scheme;
    BlockAlignment out;
    std::size_t student = 0;
    for (std::size_t k = 0; k < s.k; ++k) {
        std::size_t in_block = 0;
        for (auto r : d.retained_layers)
            if (r / s.m == k) ++in_block;
        if (in_block == 0) continue;
        student += in_block;
        out.emplace_back(student - 1, k * s.m + s.m - 1);
    }
    return out;
}

struct RepLoss {
    Tensor loss;                  // [1]
    double excluded_fraction = 0;
};

namespace detail {

inline std::pair<double, double> mean_std(std::span<const double> v) {
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    return {mu, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace detail

/// MSE between hidden states over positions that are not massive activations in the teacher
/// (and, with union_mask, the student). Statistics are global per tensor.
inline RepLoss masked_repkd_loss(const Tensor& student, const Tensor& teacher, double k, bool centered = true,
                                 bool union_mask = true) {
    if (student.shape() != teacher.shape())
        throw DimensionError("hidden-state shapes differ: " + shape_str(student.shape()) + " vs " + shape_str(teacher.shape()));
    const auto s = student.data();
    const auto t = teacher.data();
    const auto [mt, st] = detail::mean_std(t);
    const auto [ms, ss] = detail::mean_std(s);
    auto outlier = [&](double x, double mu, double sd) { return std::abs(centered ? x - mu : x) > k * sd; };
    std::vector<bool> keep(s.size());
    std::size_t excluded = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const bool ex = outlier(t[i], mt, st) || (union_mask && outlier(s[i], ms, ss));
        keep[i] = !ex;
        excluded += ex;
    }
    return {masked_mse(student, teacher, keep), static_cast<double>(excluded) / static_cast<double>(s.size())};
}

struct DistillLogRow {
    std::size_t step;
    double total, kd, diff, rep, beta, lr;
    std::vector<double> excluded;
};

struct DistillResult {
    TrainResult train;
    std::vector<DistillLogRow> log;
    BlockAlignment alignment;
};

/// Student training against a frozen teacher. `decision` (optional) is the pruning decision that produced
/// the student from the teacher; without a blockwise decision only output distillation is used.
inline DistillResult distill_finetune(ToyDiTModel student, const ToyDiTModel& teacher, const DiffusionTask& task,
                                      const DistillConfig& cfg, const PruneDecision* decision = nullptr) {
    cfg.validate();
    DistillResult out;
    if (decision) out.alignment = block_alignment(teacher.depth(), *decision);
    for (const auto& [s, t] : out.alignment)
        if (s >= student.depth() || t >= teacher.depth()) throw ConfigError("alignment does not fit the models");

    Rng rng(cfg.seed);
    DiffusionTask::Sampler sampler(task, rng.fork(11));  // same data stream as plain fine-tuning
    std::vector<Tensor> params = student.parameters();
    AdamW opt(params, AdamConfig{cfg.lr});
    Ema ema(params, cfg.ema_decay);
    DivergenceMonitor monitor;
    const bool want_rep = !out.alignment.empty() && cfg.beta0 > 0.0;

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const double lr = halving_lr(cfg.lr, step, cfg.steps, cfg.lr_halvings);
        opt.set_lr(lr);
        const Batch b = sampler.next(cfg.batch);
        ForwardOptions fo;
        if (teacher.config.num_classes > 0) fo.labels = &b.labels;

        Tensor t_out;
        ForwardTrace t_trace;
        {
            NoGradGuard ng;
            t_out = forward(teacher, b.x_t, b.t, fo, want_rep ? &t_trace : nullptr);
        }
        DistillLogRow row{step, 0, 0, 0, 0, cfg.beta(step), lr, {}};
        {
            Tape tape;
            ForwardTrace s_trace;
            const Tensor s_out = forward(student, b.x_t, b.t, fo, want_rep ? &s_trace : nullptr);
            const Tensor kd = mse(s_out, t_out);
            const Tensor diff = mse(s_out, b.noise);
            Tensor total = add(scale(kd, cfg.alpha_kd), scale(diff, cfg.alpha_diff));
            row.kd = kd.item();
            row.diff = diff.item();
            if (want_rep) {
                Tensor rep = Tensor::scalar(0.0);
                for (const auto& [si, ti] : out.alignment) {
                    const RepLoss r = masked_repkd_loss(s_trace.hidden[si], t_trace.hidden[ti], cfg.k, cfg.centered,
                                                        cfg.union_mask);
                    rep = add(rep, r.loss);
                    row.excluded.push_back(r.excluded_fraction);
                }
                row.rep = rep.item();
                total = add(total, scale(rep, row.beta));
            }
            row.total = total.item();
            if (!std::isfinite(row.total)) {
                std::ostringstream os;
                os << "non-finite distillation loss at step " << step << ": kd=" << row.kd << " diff=" << row.diff
                   << " rep=" << row.rep;
                throw NonFiniteError(os.str());
            }
            tape.backward(total);
        }
        monitor.observe(step, row.total);
        clip_grad_norm(params, cfg.grad_clip);
        opt.step();
        opt.zero_grad();
        ema.update(params);
        out.train.losses.push_back(row.total);
        out.log.push_back(std::move(row));
    }
    out.train.ema = student.clone();
    std::vector<Tensor> ep = out.train.ema.parameters();
    ema.copy_to(ep);
    out.train.model = std::move(student);
    return out;
}

/// Plain diffusion-loss recovery with EMA and halving learning rate.
inline TrainResult finetune(ToyDiTModel student, const DiffusionTask& task, const DistillConfig& cfg,
                            const std::function<void(std::size_t, double)>& on_step = {}) {
    cfg.validate();
    return train_diffusion(std::move(student), task, cfg.as_train_config(), on_step);
}

inline std::string distill_log_csv(const DistillResult& r) {
    std::ostringstream os;
    os.precision(17);
    os << "step,total,kd,diff,rep,beta,lr";
    for (std::size_t j = 0; j < r.alignment.size(); ++j) os << ",excluded_" << j;
    os << '\n';
    for (const auto& row : r.log) {
        os << row.step << ',' << row.total << ',' << row.kd << ',' << row.diff << ',' << row.rep << ',' << row.beta << ','
           << row.lr;
        for (double e : row.excluded) os << ',' << e;
        os << '\n';
    }
    return os.str();
}

}  // namespace depthprune
