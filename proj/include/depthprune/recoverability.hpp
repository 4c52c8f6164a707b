#pragma once
// Joint learning of N:M mask logits and a recoverability update (LoRA, full weights, or none).

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/lora.hpp"
#include "depthprune/mask_sampler.hpp"
#include "depthprune/optim.hpp"
#include "depthprune/toy_dit.hpp"

namespace depthprune {

enum class UpdateStrategy { LoRA, Full, Frozen };

inline UpdateStrategy parse_strategy(const std::string& s) {
    if (s == "lora") return UpdateStrategy::LoRA;
    if (s == "full") return UpdateStrategy::Full;
    if (s == "frozen") return UpdateStrategy::Frozen;
    throw ConfigError("update strategy must be lora, full or frozen, got '" + s + "'");
}

inline const char* strategy_name(UpdateStrategy s) {
    switch (s) {
        case UpdateStrategy::LoRA: return "lora";
        case UpdateStrategy::Full: return "full";
        case UpdateStrategy::Frozen: return "frozen";
    }
    return "?";
}

inline ClosedGateGrad parse_closed_gate_grad(const std::string& s) {
    if (s == "none") return ClosedGateGrad::None;
    if (s == "relaxed") return ClosedGateGrad::Relaxed;
    if (s == "full") return ClosedGateGrad::Full;
    throw ConfigError("closed-gate gradient mode must be none, relaxed or full, got '" + s + "'");
}

inline const char* closed_gate_grad_name(ClosedGateGrad g) {
    switch (g) {
        case ClosedGateGrad::None: return "none";
        case ClosedGateGrad::Relaxed: return "relaxed";
        case ClosedGateGrad::Full: return "full";
    }
    return "?";
}

struct PruneLearnConfig {
    std::size_t n = 1, m = 2;
    UpdateStrategy strategy = UpdateStrategy::LoRA;
    std::size_t lora_rank = 8;
    double lora_alpha = 2.0;           // 16 / rank
    std::size_t steps = 1024;          // one pass over a 65536-point set at batch 64
    std::size_t batch = 64;
    double weight_lr = 2e-4;
    double logits_lr = 5e-3;
    double grad_clip = 1.0;
    double tau_start = 4.0, tau_end = 0.1;
    TemperatureSchedule::Decay tau_decay = TemperatureSchedule::Decay::Linear;
    ClosedGateGrad closed_gate_grad = ClosedGateGrad::None;  // what autograd gives through a hard gate
    std::uint64_t seed = 0;

    void validate() const {
        if (strategy == UpdateStrategy::Frozen && weight_lr > 0.0)
            throw ConfigError("prune.weight_lr must be 0 when prune.strategy is frozen");
        if (batch == 0) throw ConfigError("prune.batch must be positive");
        if (weight_lr < 0.0 || logits_lr < 0.0) throw ConfigError("learning rates must be non-negative");
        TemperatureSchedule{tau_start, tau_end, steps, tau_decay}.validate();
    }

    TemperatureSchedule schedule() const { return {tau_start, tau_end, steps, tau_decay}; }
};

inline void to_json(nlohmann::json& j, const PruneLearnConfig& c) {
    j = {{"scheme", std::to_string(c.n) + ":" + std::to_string(c.m)},
         {"strategy", strategy_name(c.strategy)},
         {"lora_rank", c.lora_rank},
         {"lora_alpha", c.lora_alpha},
         {"steps", c.steps},
         {"batch", c.batch},
         {"weight_lr", c.weight_lr},
         {"logits_lr", c.logits_lr},
         {"grad_clip", c.grad_clip},
         {"tau_start", c.tau_start},
         {"tau_end", c.tau_end},
         {"tau_decay", c.tau_decay == TemperatureSchedule::Decay::Linear ? "linear" : "exponential"},
         {"closed_gate_grad", closed_gate_grad_name(c.closed_gate_grad)},
         {"seed", c.seed}};
}

struct PruneLogRow {
    std::size_t step;
    double loss;
    double tau;
    std::vector<double> entropy;
    std::vector<std::size_t> argmax;
    std::vector<double> confidence;
};

struct LearnResult {
    MaskDistribution dist;
    PruneDecision decision;
    std::vector<PruneLogRow> log;
    double update_drift = 0.0;  // L2 distance the discarded update moved
    double base_drift = 0.0;    // L2 distance the working copy of the base weights moved
};

namespace detail {

inline std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& ps) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ps) out.push_back(p.values());
    return out;
}

inline double drift(const std::vector<Tensor>& ps, const std::vector<std::vector<double>>& before) {
    double s = 0.0;
    for (std::size_t k = 0; k < ps.size(); ++k)
        for (std::size_t i = 0; i < before[k].size(); ++i) {
            const double d = ps[k].values()[i] - before[k][i];
            s += d * d;
        }
    return std::sqrt(s);
}

}  // namespace detail

inline std::string mask_bits(const std::vector<double>& gates) {
    std::string s;
    for (double g : gates) s += g != 0.0 ? '1' : '0';
    return s;
}

/// Learns per-block mask logits jointly with the recoverability update. The base model is not modified;
/// the update (LoRA factors or full-weight copy) is discarded on return.
inline LearnResult learn_pruning(const ToyDiTModel& base, const DiffusionTask& task, const PruneLearnConfig& cfg) {
    cfg.validate();
    const NMScheme scheme = NMScheme::for_depth(cfg.n, cfg.m, base.depth());
    Rng rng(cfg.seed);
    Rng data_rng = rng.fork(21);
    Rng gumbel_rng = rng.fork(22);
    Rng lora_rng = rng.fork(23);

    ToyDiTModel model = base.clone();
    std::optional<LoRAAdapter> lora;
    std::vector<Tensor> weights;
    switch (cfg.strategy) {
        case UpdateStrategy::LoRA:
            model.set_requires_grad(false);
            lora = LoRAAdapter::create(model.linear_dims(), cfg.lora_rank, cfg.lora_alpha, lora_rng);
            weights = lora->parameters();
            break;
        case UpdateStrategy::Full:
            weights = model.parameters();
            break;
        case UpdateStrategy::Frozen:
            model.set_requires_grad(false);
            break;
    }

    const auto weights0 = detail::snapshot(weights);
    const std::vector<Tensor> base_params = model.parameters();
    const auto base0 = detail::snapshot(base_params);

    LearnResult out{MaskDistribution::uniform(scheme), {}, {}};
    MaskDistribution& dist = out.dist;
    AdamConfig lc;
    lc.lr = cfg.logits_lr;
    AdamW logit_opt({dist.logits}, lc);
    AdamConfig wc;
    wc.lr = cfg.weight_lr;
    AdamW weight_opt(weights, wc);
    std::vector<Tensor> logit_params{dist.logits};

    DiffusionTask::Sampler sampler(task, std::move(data_rng));
    const TemperatureSchedule sched = cfg.schedule();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const double tau = sched(step - 1);
        const Batch b = sampler.next(cfg.batch);
        double lv;
        {
            Tape tape;
            const MaskSample ms = sample_full(dist, tau, gumbel_rng);
            ForwardOptions fo;
            fo.gate_tensors = ms.gate_tensors;
            fo.closed_gate_scale.resize(ms.gates.size());
            for (std::size_t i = 0; i < ms.gates.size(); ++i) {
                switch (cfg.closed_gate_grad) {
                    case ClosedGateGrad::None: fo.closed_gate_scale[i] = 0.0; break;
                    case ClosedGateGrad::Relaxed: fo.closed_gate_scale[i] = ms.soft_gates[i]; break;
                    case ClosedGateGrad::Full: fo.closed_gate_scale[i] = 1.0; break;
                }
            }
            fo.lora = lora ? &*lora : nullptr;
            Tensor loss;
            try {
                loss = diffusion_loss(model, b, fo);
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("mask learning step " + std::to_string(step) + " with mask " + mask_bits(ms.gates) +
                                     ": " + e.what());
            }
            lv = loss.item();
            tape.backward(loss);
            if (!detail::all_finite(dist.logits.grad()))
                throw NonFiniteError("mask learning step " + std::to_string(step) + " with mask " + mask_bits(ms.gates) +
                                     ": non-finite logit gradient (a closed layer produced non-finite output)");
        }
        clip_grad_norm(logit_params, cfg.grad_clip);
        logit_opt.step();
        logit_opt.zero_grad();
        if (!weights.empty()) {
            clip_grad_norm(weights, cfg.grad_clip);
            weight_opt.step();
        }
        // base weights under lora/frozen never accumulate into an optimizer, but clear stray grads
        for (auto& p : model.parameters()) p.zero_grad();
        for (auto& p : weights) p.zero_grad();

        PruneLogRow row{step, lv, tau, {}, {}, {}};
        const PruneDecision d = decide(dist);
        for (std::size_t k = 0; k < scheme.k; ++k) row.entropy.push_back(dist.entropy(k));
        row.argmax = d.per_block_choice;
        row.confidence = d.confidences;
        out.log.push_back(std::move(row));
    }
    out.decision = decide(dist);
    out.update_drift = detail::drift(weights, weights0);
    out.base_drift = detail::drift(base_params, base0);
    return out;
}

inline std::string prune_log_csv(const LearnResult& r) {
    std::ostringstream os;
    os.precision(17);
    const std::size_t K = r.dist.scheme.k;
    os << "step,loss,tau";
    for (std::size_t k = 0; k < K; ++k) os << ",entropy_" << k;
    for (std::size_t k = 0; k < K; ++k) os << ",argmax_" << k;
    os << '\n';
    for (const auto& row : r.log) {
        os << row.step << ',' << row.loss << ',' << row.tau;
        for (double h : row.entropy) os << ',' << h;
        for (auto a : row.argmax) os << ',' << a;
        os << '\n';
    }
    return os.str();
}

/// Physically removes the pruned layers; base weights only.
inline ToyDiTModel apply_decision(const ToyDiTModel& model, const PruneDecision& d) {
    if (d.depth != model.depth())
        throw ConfigError("decision was made for depth " + std::to_string(d.depth) + " but the model has depth " +
                          std::to_string(model.depth()));
    for (std::size_t i = 1; i < d.retained_layers.size(); ++i)
        if (d.retained_layers[i] <= d.retained_layers[i - 1]) throw ConfigError("retained layers must be strictly increasing");
    return model.extract_layers(d.retained_layers);
}

/// Decision for an arbitrary binary mask (baselines), with no block structure.
inline PruneDecision global_decision(const std::vector<double>& mask) {
    PruneDecision d;
    d.depth = mask.size();
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0) d.retained_layers.push_back(i);
    d.scheme = {d.retained_layers.size(), mask.size(), 1};
    return d;
}

inline PruneDecision decision_from_json(const nlohmann::json& j) {
    PruneDecision d;
    d.depth = j.at("depth").get<std::size_t>();
    d.retained_layers = j.at("retained_layers").get<std::vector<std::size_t>>();
    d.per_block_choice = j.at("per_block_choice").get<std::vector<std::size_t>>();
    d.confidences = j.at("confidences").get<std::vector<double>>();
    const std::string s = j.at("scheme").get<std::string>();
    d.scheme = s == "global" ? NMScheme{d.retained_layers.size(), d.depth, 1} : NMScheme::parse(s, d.depth);
    return d;
}

}  // namespace depthprune
