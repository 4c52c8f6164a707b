#pragma once
// A small diffusion transformer over tokenized 2-D points, with per-layer gates.
//
// Each layer is one prunable unit (attention + MLP, pre-LayerNorm, residual).
// With gate value m the layer computes x_next = m * layer(x) + (1 - m) * x.

#include <algorithm>
#include <array>
#include <functional>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/checkpoint.hpp"
#include "depthprune/errors.hpp"
#include "depthprune/lora.hpp"
#include "depthprune/ops.hpp"
#include "depthprune/optim.hpp"
#include "depthprune/rng.hpp"

namespace depthprune {

struct ToyDiTConfig {
    std::size_t depth = 8;
    std::size_t hidden_dim = 64;
    std::size_t heads = 4;
    double mlp_ratio = 4.0;
    std::size_t seq_len = 16;
    std::size_t in_dim = 2;
    std::size_t num_timesteps = 100;
    std::size_t num_classes = 0;  // 0 = unconditional

    std::size_t mlp_dim() const { return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(hidden_dim))); }

    void validate() const {
        if (depth == 0 || hidden_dim == 0 || heads == 0 || seq_len == 0 || in_dim == 0 || num_timesteps == 0)
            throw ConfigError("model dimensions must be positive");
        if (hidden_dim % heads != 0) throw ConfigError("hidden_dim must be divisible by heads");
        if (!(mlp_ratio > 0.0) || mlp_dim() == 0) throw ConfigError("mlp_ratio must be positive");
    }

    friend bool operator==(const ToyDiTConfig&, const ToyDiTConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ToyDiTConfig& c) {
    j = {{"depth", c.depth},           {"hidden_dim", c.hidden_dim}, {"heads", c.heads},
         {"mlp_ratio", c.mlp_ratio},   {"seq_len", c.seq_len},       {"in_dim", c.in_dim},
         {"num_timesteps", c.num_timesteps}, {"num_classes", c.num_classes}};
}
inline void from_json(const nlohmann::json& j, ToyDiTConfig& c) {
    j.at("depth").get_to(c.depth);
    j.at("hidden_dim").get_to(c.hidden_dim);
    j.at("heads").get_to(c.heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("seq_len").get_to(c.seq_len);
    j.at("in_dim").get_to(c.in_dim);
    j.at("num_timesteps").get_to(c.num_timesteps);
    j.at("num_classes").get_to(c.num_classes);
}

struct LinearParams {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out]
};

struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    std::array<LinearParams, kLinearSlots> linear;  // indexed by LinearSlot
    Tensor ln2_gain, ln2_bias;

    LinearParams& at(LinearSlot s) { return linear[static_cast<std::size_t>(s)]; }
    const LinearParams& at(LinearSlot s) const { return linear[static_cast<std::size_t>(s)]; }
};

namespace detail {

inline Tensor clone_param(const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(true);
    return c;
}

inline LinearParams make_linear(std::size_t out, std::size_t in, double stddev, Rng& rng) {
    LinearParams p{Tensor::zeros({out, in}, true), Tensor::zeros({out}, true)};
    for (auto& v : p.weight.data()) v = rng.normal(0.0, stddev);
    return p;
}

inline double xavier_std(std::size_t in, std::size_t out) { return std::sqrt(2.0 / static_cast<double>(in + out)); }

}  // namespace detail

/// Fixed sinusoidal embedding table [num_timesteps, dim].
inline Tensor sinusoidal_table(std::size_t num_timesteps, std::size_t dim) {
    Tensor t = Tensor::zeros({num_timesteps, dim});
    const std::size_t half = dim / 2;
    for (std::size_t s = 0; s < num_timesteps; ++s) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            t.data()[s * dim + i] = std::cos(static_cast<double>(s) * freq);
            t.data()[s * dim + half + i] = std::sin(static_cast<double>(s) * freq);
        }
    }
    return t;
}

class ToyDiTModel {
public:
    ToyDiTConfig config;
    LinearParams input;
    Tensor pos_emb;      // [seq_len, d]
    LinearParams time_proj;
    Tensor class_emb;    // [num_classes, d] when conditional
    std::vector<LayerParams> layers;
    Tensor final_gain, final_bias;
    LinearParams output;
    Tensor time_table;   // fixed sinusoid, not trained

    ToyDiTModel() = default;
    ToyDiTModel(ToyDiTModel&&) = default;
    ToyDiTModel& operator=(ToyDiTModel&&) = default;
    // Parameters are shared handles; copies must be explicit through clone().
    ToyDiTModel(const ToyDiTModel&) = delete;
    ToyDiTModel& operator=(const ToyDiTModel&) = delete;

    static ToyDiTModel init(const ToyDiTConfig& cfg, Rng& rng) {
        cfg.validate();
        ToyDiTModel m;
        m.config = cfg;
        const std::size_t d = cfg.hidden_dim, h = cfg.mlp_dim();
        m.input = detail::make_linear(d, cfg.in_dim, detail::xavier_std(cfg.in_dim, d), rng);
        m.pos_emb = Tensor::zeros({cfg.seq_len, d}, true);
        for (auto& v : m.pos_emb.data()) v = rng.normal(0.0, 0.02);
        m.time_proj = detail::make_linear(d, d, detail::xavier_std(d, d), rng);
        if (cfg.num_classes > 0) {
            m.class_emb = Tensor::zeros({cfg.num_classes, d}, true);
            for (auto& v : m.class_emb.data()) v = rng.normal(0.0, 0.02);
        }
        for (std::size_t i = 0; i < cfg.depth; ++i) {
            LayerParams L;
            L.ln1_gain = Tensor::full({d}, 1.0, true);
            L.ln1_bias = Tensor::zeros({d}, true);
            L.ln2_gain = Tensor::full({d}, 1.0, true);
            L.ln2_bias = Tensor::zeros({d}, true);
            for (auto s : {LinearSlot::Q, LinearSlot::K, LinearSlot::V, LinearSlot::O})
                L.at(s) = detail::make_linear(d, d, detail::xavier_std(d, d), rng);
            L.at(LinearSlot::Up) = detail::make_linear(h, d, detail::xavier_std(d, h), rng);
            L.at(LinearSlot::Down) = detail::make_linear(d, h, detail::xavier_std(h, d), rng);
            m.layers.push_back(std::move(L));
        }
        m.final_gain = Tensor::full({d}, 1.0, true);
        m.final_bias = Tensor::zeros({d}, true);
        m.output = detail::make_linear(cfg.in_dim, d, 0.02, rng);
        m.time_table = sinusoidal_table(cfg.num_timesteps, d);
        return m;
    }

    ToyDiTModel clone() const {
        ToyDiTModel m;
        m.config = config;
        auto cl = [](const LinearParams& p) { return LinearParams{detail::clone_param(p.weight), detail::clone_param(p.bias)}; };
        m.input = cl(input);
        m.pos_emb = detail::clone_param(pos_emb);
        m.time_proj = cl(time_proj);
        if (class_emb.defined()) m.class_emb = detail::clone_param(class_emb);
        for (const auto& L : layers) m.layers.push_back(clone_layer(L));
        m.final_gain = detail::clone_param(final_gain);
        m.final_bias = detail::clone_param(final_bias);
        m.output = cl(output);
        m.time_table = time_table.detach();
        return m;
    }

    static LayerParams clone_layer(const LayerParams& L) {
        LayerParams c;
        c.ln1_gain = detail::clone_param(L.ln1_gain);
        c.ln1_bias = detail::clone_param(L.ln1_bias);
        c.ln2_gain = detail::clone_param(L.ln2_gain);
        c.ln2_bias = detail::clone_param(L.ln2_bias);
        for (std::size_t s = 0; s < kLinearSlots; ++s)
            c.linear[s] = {detail::clone_param(L.linear[s].weight), detail::clone_param(L.linear[s].bias)};
        return c;
    }

    /// Copy containing only the listed layers, in the given order.
    ToyDiTModel extract_layers(const std::vector<std::size_t>& keep) const {
        ToyDiTModel m = clone();
        m.layers.clear();
        for (auto i : keep) {
            if (i >= layers.size()) throw ConfigError("layer index " + std::to_string(i) + " out of range");
            m.layers.push_back(clone_layer(layers[i]));
        }
        m.config.depth = keep.size();
        return m;
    }

    std::size_t depth() const { return layers.size(); }

    /// Trainable parameters with stable hierarchical names.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> ps;
        auto lin = [&ps](const std::string& name, const LinearParams& p) {
            ps.emplace_back(name + ".weight", p.weight);
            ps.emplace_back(name + ".bias", p.bias);
        };
        lin("input", input);
        ps.emplace_back("pos_emb", pos_emb);
        lin("time_proj", time_proj);
        if (class_emb.defined()) ps.emplace_back("class_emb", class_emb);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string pre = "layers." + std::to_string(i) + ".";
            const auto& L = layers[i];
            ps.emplace_back(pre + "ln1.gain", L.ln1_gain);
            ps.emplace_back(pre + "ln1.bias", L.ln1_bias);
            for (std::size_t s = 0; s < kLinearSlots; ++s) lin(pre + kSlotNames[s], L.linear[s]);
            ps.emplace_back(pre + "ln2.gain", L.ln2_gain);
            ps.emplace_back(pre + "ln2.bias", L.ln2_bias);
        }
        ps.emplace_back("final_ln.gain", final_gain);
        ps.emplace_back("final_ln.bias", final_bias);
        lin("output", output);
        return ps;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [_, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::vector<Tensor> layer_parameters(std::size_t i) const {
        const auto& L = layers.at(i);
        std::vector<Tensor> out{L.ln1_gain, L.ln1_bias, L.ln2_gain, L.ln2_bias};
        for (const auto& p : L.linear) {
            out.push_back(p.weight);
            out.push_back(p.bias);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : named_parameters()) n += t.numel();
        return n;
    }

    /// (out, in) of every LoRA-capable map, per layer.
    std::vector<std::array<std::pair<std::size_t, std::size_t>, kLinearSlots>> linear_dims() const {
        std::vector<std::array<std::pair<std::size_t, std::size_t>, kLinearSlots>> dims;
        for (const auto& L : layers) {
            std::array<std::pair<std::size_t, std::size_t>, kLinearSlots> a;
            for (std::size_t s = 0; s < kLinearSlots; ++s) a[s] = {L.linear[s].weight.dim(0), L.linear[s].weight.dim(1)};
            dims.push_back(a);
        }
        return dims;
    }

    void set_requires_grad(bool v) {
        for (auto& [_, t] : named_parameters()) {
            Tensor h = t;
            h.set_requires_grad(v);
        }
    }

    // --- serialization --------------------------------------------------

    std::vector<Blob> to_blobs(const std::string& prefix) const {
        std::vector<Blob> out;
        for (const auto& [name, t] : named_parameters()) out.push_back({prefix + name, t.shape(), t.values()});
        return out;
    }

    static ToyDiTModel from_blobs(const ToyDiTConfig& cfg, const CheckpointFile& ck, const std::string& prefix) {
        Rng scratch(0);
        ToyDiTModel m = init(cfg, scratch);
        for (auto& [name, t] : m.named_parameters()) {
            const Blob& b = ck.at(prefix + name);
            if (b.shape != t.shape())
                throw DimensionError("blob '" + b.name + "' has shape " + shape_str(b.shape) + ", expected " + shape_str(t.shape()));
            Tensor h = t;
            h.values() = b.values;
        }
        return m;
    }
};

// ---------------------------------------------------------------------------
// Forward pass

/// How a closed gate (m = 0) treats gradients for its own layer during mask learning.
enum class ClosedGateGrad {
    None,     // ordinary autodiff: the layer receives nothing
    Relaxed,  // scaled by the relaxed (soft) gate value
    Full,     // as if the gate were open; upstream layers are not affected
};

struct ForwardOptions {
    /// Per-layer gate values in [0, 1]; empty means every layer is active.
    std::vector<double> mask;
    /// Optional differentiable gates ([1] tensors, one per layer). Their values must equal `mask`.
    std::vector<Tensor> gate_tensors;
    /// Per-layer gradient scale for closed gates (used with gate_tensors); defaults to the gate value.
    std::vector<double> closed_gate_scale;
    const LoRAAdapter* lora = nullptr;
    /// Class labels, required when the model is class-conditional.
    const std::vector<std::size_t>* labels = nullptr;
};

struct ForwardTrace {
    std::vector<Tensor> hidden;  // x_{i+1} after each layer, [B, T, d]
    std::vector<Tensor> layer_in;
    std::vector<Tensor> layer_out;  // raw layer output phi_i(x_i) when computed
    std::optional<std::size_t> first_nonfinite_layer;
    bool record_layer_io = false;
};

namespace detail {

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline Tensor apply_linear(const LinearParams& p, const Tensor& x, const LoRAAdapter* lora, std::size_t layer, LinearSlot slot) {
    if (lora) return linear(x, lora->effective_weight(layer, slot, p.weight), p.bias);
    return linear(x, p.weight, p.bias);
}

}  // namespace detail

/// One transformer layer phi_i applied to x [B, T, d].
inline Tensor layer_forward(const ToyDiTModel& model, std::size_t i, const Tensor& x, const LoRAAdapter* lora) {
    const auto& L = model.layers[i];
    const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    const std::size_t H = model.config.heads, dh = d / H;
    const Tensor hn = layernorm(x, L.ln1_gain, L.ln1_bias);
    auto heads = [&](const Tensor& t) {
        return reshape(permute(reshape(t, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh});
    };
    const Tensor q = heads(detail::apply_linear(L.at(LinearSlot::Q), hn, lora, i, LinearSlot::Q));
    const Tensor k = heads(detail::apply_linear(L.at(LinearSlot::K), hn, lora, i, LinearSlot::K));
    const Tensor v = heads(detail::apply_linear(L.at(LinearSlot::V), hn, lora, i, LinearSlot::V));
    const Tensor att = softmax(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
    const Tensor ctx = reshape(permute(reshape(bmm(att, v), {B, H, T, dh}), {0, 2, 1, 3}), {B, T, d});
    const Tensor h1 = add(x, detail::apply_linear(L.at(LinearSlot::O), ctx, lora, i, LinearSlot::O));
    const Tensor hn2 = layernorm(h1, L.ln2_gain, L.ln2_bias);
    const Tensor up = gelu(detail::apply_linear(L.at(LinearSlot::Up), hn2, lora, i, LinearSlot::Up));
    return add(h1, detail::apply_linear(L.at(LinearSlot::Down), up, lora, i, LinearSlot::Down));
}

/// Embeds noisy points x_t [B, in_dim] at timesteps t into tokens [B, T, d].
inline Tensor embed(const ToyDiTModel& model, const Tensor& x_t, const std::vector<std::size_t>& t,
                    const std::vector<std::size_t>* labels) {
    const auto& c = model.config;
    if (x_t.rank() != 2 || x_t.dim(1) != c.in_dim) throw DimensionError("input must be [batch, in_dim], got " + shape_str(x_t.shape()));
    const std::size_t B = x_t.dim(0), T = c.seq_len;
    if (t.size() != B) throw DimensionError("timestep count does not match batch size");
    std::vector<double> tok(B * T * c.in_dim);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < T; ++j)
            for (std::size_t k = 0; k < c.in_dim; ++k) tok[(b * T + j) * c.in_dim + k] = x_t.data()[b * c.in_dim + k];
    // tokens are plain copies of x_t, so route their gradient back through a reshape-free gather
    Tensor tokens;
    if (x_t.requires_grad() && Tape::active()) {
        std::vector<std::size_t> rows(B * T);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < T; ++j) rows[b * T + j] = b;
        tokens = reshape(gather_rows(x_t, rows), {B, T, c.in_dim});
    } else {
        tokens = Tensor::from({B, T, c.in_dim}, std::move(tok));
    }
    Tensor h = add(linear(tokens, model.input.weight, model.input.bias), model.pos_emb);
    std::vector<std::size_t> per_token(B * T);
    for (std::size_t b = 0; b < B; ++b) {
        if (t[b] >= c.num_timesteps) throw DimensionError("timestep " + std::to_string(t[b]) + " out of range");
        for (std::size_t j = 0; j < T; ++j) per_token[b * T + j] = t[b];
    }
    const Tensor temb_table = linear(model.time_table, model.time_proj.weight, model.time_proj.bias);
    h = add(h, reshape(gather_rows(temb_table, per_token), {B, T, c.hidden_dim}));
    if (c.num_classes > 0) {
        if (!labels || labels->size() != B) throw ConfigError("class-conditional model requires one label per example");
        std::vector<std::size_t> lab(B * T);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < T; ++j) lab[b * T + j] = (*labels)[b];
        h = add(h, reshape(gather_rows(model.class_emb, lab), {B, T, c.hidden_dim}));
    }
    return h;
}

/// Final norm, projection, and mean over tokens: [B, T, d] -> [B, in_dim].
inline Tensor head(const ToyDiTModel& model, const Tensor& h) {
    const Tensor o = linear(layernorm(h, model.final_gain, model.final_bias), model.output.weight, model.output.bias);
    return mean_axis(o, 1);
}

/// Gated forward pass predicting the noise for x_t.
inline Tensor forward(const ToyDiTModel& model, const Tensor& x_t, const std::vector<std::size_t>& t,
                      const ForwardOptions& opt = {}, ForwardTrace* trace = nullptr) {
    const std::size_t L = model.depth();
    if (!opt.mask.empty() && opt.mask.size() != L)
        throw ConfigError("mask length " + std::to_string(opt.mask.size()) + " does not match depth " + std::to_string(L));
    if (!opt.gate_tensors.empty() && opt.gate_tensors.size() != L)
        throw ConfigError("gate tensor count does not match depth");
    if (opt.lora && opt.lora->layers.size() != L) throw ConfigError("LoRA adapter depth does not match model depth");
    for (double m : opt.mask)
        if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("gate values must lie in [0, 1]");

    Tensor x = embed(model, x_t, t, opt.labels);
    for (std::size_t i = 0; i < L; ++i) {
        const double m = opt.gate_tensors.empty() ? (opt.mask.empty() ? 1.0 : opt.mask[i]) : opt.gate_tensors[i].item();
        const bool differentiable_gate = !opt.gate_tensors.empty() && Tape::active() != nullptr;
        Tensor branch;
        if (differentiable_gate) {
            // A closed gate still computes its layer so that d(loss)/d(m) = <g, phi(x) - x> is available.
            const double s = opt.closed_gate_scale.empty() ? m : opt.closed_gate_scale[i];
            branch = layer_forward(model, i, m == 0.0 ? x.detach() : x, opt.lora);
            if (trace && trace->record_layer_io) {
                trace->layer_in.push_back(x);
                trace->layer_out.push_back(branch);
            }
            x = gate(branch, x, opt.gate_tensors[i], m == 0.0 ? s : m);
        } else if (m == 1.0) {
            branch = layer_forward(model, i, x, opt.lora);
            if (trace && trace->record_layer_io) {
                trace->layer_in.push_back(x);
                trace->layer_out.push_back(branch);
            }
            x = branch;
        } else if (m == 0.0) {
            if (trace && trace->record_layer_io) {
                trace->layer_in.push_back(x);
                trace->layer_out.push_back({});
            }
        } else {
            branch = layer_forward(model, i, x, opt.lora);
            if (trace && trace->record_layer_io) {
                trace->layer_in.push_back(x);
                trace->layer_out.push_back(branch);
            }
            x = gate(branch, x, Tensor::scalar(m), m);
        }
        if (trace) {
            trace->hidden.push_back(x);
            if (!trace->first_nonfinite_layer && !detail::all_finite(x.data())) trace->first_nonfinite_layer = i;
        }
    }
    return head(model, x);
}

// ---------------------------------------------------------------------------
// Synthetic diffusion task

struct TaskConfig {
    std::size_t num_modes = 8;
    double radius = std::numbers::sqrt2;  // unit per-coordinate variance
    double mode_std = 0.05;
    std::size_t train_size = 65536;
    std::size_t heldout_size = 4096;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::uint64_t data_seed = 1234;

    friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TaskConfig& c) {
    j = {{"num_modes", c.num_modes}, {"radius", c.radius},         {"mode_std", c.mode_std},
         {"train_size", c.train_size}, {"heldout_size", c.heldout_size}, {"beta_start", c.beta_start},
         {"beta_end", c.beta_end},   {"data_seed", c.data_seed}};
}
inline void from_json(const nlohmann::json& j, TaskConfig& c) {
    j.at("num_modes").get_to(c.num_modes);
    j.at("radius").get_to(c.radius);
    j.at("mode_std").get_to(c.mode_std);
    j.at("train_size").get_to(c.train_size);
    j.at("heldout_size").get_to(c.heldout_size);
    j.at("beta_start").get_to(c.beta_start);
    j.at("beta_end").get_to(c.beta_end);
    j.at("data_seed").get_to(c.data_seed);
}

/// A minibatch with pre-drawn timesteps and noise.
struct Batch {
    Tensor x0;     // [B, 2]
    Tensor noise;  // [B, 2]
    Tensor x_t;    // [B, 2]
    std::vector<std::size_t> t;
    std::vector<std::size_t> labels;

    std::size_t size() const { return t.size(); }
};

/// 2-D Gaussian mixture on a circle with a linear-beta DDPM noise schedule.
class DiffusionTask {
public:
    DiffusionTask(TaskConfig cfg, std::size_t num_timesteps) : cfg_(cfg) {
        if (cfg.num_modes == 0 || cfg.train_size == 0 || cfg.heldout_size == 0) throw ConfigError("task sizes must be positive");
        if (!(cfg.beta_start > 0.0 && cfg.beta_end >= cfg.beta_start && cfg.beta_end < 1.0))
            throw ConfigError("beta schedule must satisfy 0 < beta_start <= beta_end < 1");
        if (num_timesteps == 0) throw ConfigError("num_timesteps must be positive");
        double ab = 1.0;
        for (std::size_t s = 0; s < num_timesteps; ++s) {
            const double beta = num_timesteps == 1
                                    ? cfg.beta_start
                                    : cfg.beta_start + (cfg.beta_end - cfg.beta_start) * static_cast<double>(s) /
                                                           static_cast<double>(num_timesteps - 1);
            ab *= 1.0 - beta;
            alpha_bar_.push_back(ab);
        }
        Rng rng(cfg.data_seed);
        Rng train_rng = rng.fork(1);
        Rng held_rng = rng.fork(2);
        draw_points(train_rng, cfg.train_size, train_points_, train_labels_);
        std::vector<double> hp;
        std::vector<std::size_t> hl;
        draw_points(held_rng, cfg.heldout_size, hp, hl);
        heldout_ = make_batch(hp, hl, held_rng);
    }

    const TaskConfig& config() const { return cfg_; }
    std::size_t num_timesteps() const { return alpha_bar_.size(); }
    const std::vector<double>& alpha_bar() const { return alpha_bar_; }
    std::size_t train_size() const { return train_labels_.size(); }
    const std::vector<double>& train_points() const { return train_points_; }
    const Batch& heldout() const { return heldout_; }

    std::array<double, 2> mode_center(std::size_t k) const {
        const double ang = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg_.num_modes);
        return {cfg_.radius * std::cos(ang), cfg_.radius * std::sin(ang)};
    }

    /// Fresh draws from the true mixture, flattened [n, 2].
    std::vector<double> sample_mixture(std::size_t n, Rng& rng) const {
        std::vector<double> pts;
        std::vector<std::size_t> labels;
        draw_points(rng, n, pts, labels);
        return pts;
    }

    /// Builds a batch from given clean points, drawing t uniformly and Gaussian noise.
    Batch make_batch(const std::vector<double>& points, const std::vector<std::size_t>& labels, Rng& rng) const {
        const std::size_t B = labels.size();
        std::vector<std::size_t> t(B);
        for (auto& s : t) s = static_cast<std::size_t>(rng.below(num_timesteps()));
        return make_batch_at(points, labels, t, rng);
    }

    Batch make_batch_at(const std::vector<double>& points, const std::vector<std::size_t>& labels,
                        const std::vector<std::size_t>& t, Rng& rng) const {
        const std::size_t B = labels.size();
        Batch b;
        b.t = t;
        b.labels = labels;
        b.x0 = Tensor::from({B, 2}, std::vector<double>(points.begin(), points.begin() + static_cast<std::ptrdiff_t>(2 * B)));
        b.noise = Tensor::zeros({B, 2});
        for (auto& v : b.noise.data()) v = rng.normal();
        b.x_t = noised(b.x0, b.noise, b.t);
        return b;
    }

    Tensor noised(const Tensor& x0, const Tensor& noise, const std::vector<std::size_t>& t) const {
        Tensor out = Tensor::zeros(x0.shape());
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double ab = alpha_bar_.at(t[i]);
            for (std::size_t k = 0; k < 2; ++k)
                out.data()[i * 2 + k] = std::sqrt(ab) * x0.data()[i * 2 + k] + std::sqrt(1.0 - ab) * noise.data()[i * 2 + k];
        }
        return out;
    }

    /// Training minibatch drawn without replacement within an epoch.
    class Sampler {
    public:
        Sampler(const DiffusionTask& task, Rng rng) : task_(&task), rng_(std::move(rng)) {
            order_.resize(task.train_size());
            for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
            pos_ = order_.size();
        }

        Batch next(std::size_t batch) {
            std::vector<double> pts;
            std::vector<std::size_t> labels;
            pts.reserve(batch * 2);
            for (std::size_t i = 0; i < batch; ++i) {
                if (pos_ == order_.size()) {
                    rng_.shuffle(order_.begin(), order_.end());
                    pos_ = 0;
                }
                const std::size_t idx = order_[pos_++];
                pts.push_back(task_->train_points_[2 * idx]);
                pts.push_back(task_->train_points_[2 * idx + 1]);
                labels.push_back(task_->train_labels_[idx]);
            }
            return task_->make_batch(pts, labels, rng_);
        }

    private:
        const DiffusionTask* task_;
        Rng rng_;
        std::vector<std::size_t> order_;
        std::size_t pos_;
    };

private:
    void draw_points(Rng& rng, std::size_t n, std::vector<double>& pts, std::vector<std::size_t>& labels) const {
        pts.resize(2 * n);
        labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(rng.below(cfg_.num_modes));
            const auto c = mode_center(k);
            labels[i] = k;
            pts[2 * i] = c[0] + cfg_.mode_std * rng.normal();
            pts[2 * i + 1] = c[1] + cfg_.mode_std * rng.normal();
        }
    }

    TaskConfig cfg_;
    std::vector<double> alpha_bar_;
    std::vector<double> train_points_;
    std::vector<std::size_t> train_labels_;
    Batch heldout_;
};

/// Noise-prediction MSE for a batch; throws NonFiniteError naming the first non-finite layer.
inline Tensor diffusion_loss(const ToyDiTModel& model, const Batch& batch, const ForwardOptions& opt = {}) {
    ForwardOptions o = opt;
    if (model.config.num_classes > 0 && !o.labels) o.labels = &batch.labels;
    ForwardTrace trace;
    const Tensor pred = forward(model, batch.x_t, batch.t, o, &trace);
    Tensor loss = mse(pred, batch.noise);
    if (!std::isfinite(loss.item())) {
        std::string where = trace.first_nonfinite_layer ? "layer " + std::to_string(*trace.first_nonfinite_layer)
                                                        : "embedding or output head";
        throw NonFiniteError("non-finite diffusion loss; first non-finite activation at " + where);
    }
    return loss;
}

/// Mean loss over a large batch evaluated in chunks without recording gradients.
inline double evaluate_loss(const ToyDiTModel& model, const Batch& batch, const std::vector<double>& mask = {},
                            std::size_t chunk = 1024) {
    NoGradGuard ng;
    const std::size_t n = batch.size();
    double total = 0.0;
    for (std::size_t s = 0; s < n; s += chunk) {
        const std::size_t e = std::min(n, s + chunk);
        const std::size_t B = e - s;
        Tensor x = Tensor::from({B, 2}, std::vector<double>(batch.x_t.values().begin() + static_cast<std::ptrdiff_t>(2 * s),
                                                            batch.x_t.values().begin() + static_cast<std::ptrdiff_t>(2 * e)));
        Tensor eps = Tensor::from({B, 2}, std::vector<double>(batch.noise.values().begin() + static_cast<std::ptrdiff_t>(2 * s),
                                                              batch.noise.values().begin() + static_cast<std::ptrdiff_t>(2 * e)));
        std::vector<std::size_t> t(batch.t.begin() + static_cast<std::ptrdiff_t>(s), batch.t.begin() + static_cast<std::ptrdiff_t>(e));
        std::vector<std::size_t> lab;
        ForwardOptions opt;
        opt.mask = mask;
        if (model.config.num_classes > 0) {
            lab.assign(batch.labels.begin() + static_cast<std::ptrdiff_t>(s), batch.labels.begin() + static_cast<std::ptrdiff_t>(e));
            opt.labels = &lab;
        }
        const Tensor pred = forward(model, x, t, opt);
        total += mse(pred, eps).item() * static_cast<double>(B);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t steps = 5000;
    std::size_t batch = 128;
    AdamConfig adam{};
    double grad_clip = 1.0;
    double ema_decay = 0.999;
    std::size_t lr_halvings = 0;  // base training uses a constant rate
    std::uint64_t seed = 0;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"steps", c.steps}, {"batch", c.batch}, {"lr", c.adam.lr}, {"weight_decay", c.adam.weight_decay},
         {"grad_clip", c.grad_clip}, {"ema_decay", c.ema_decay}, {"lr_halvings", c.lr_halvings}, {"seed", c.seed}};
}

struct TrainResult {
    ToyDiTModel model;  // raw weights
    ToyDiTModel ema;    // EMA weights, used for evaluation and downstream stages
    std::vector<double> losses;
};

class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Watches for a loss stuck above 10x its initial value for 100 consecutive steps.
class DivergenceMonitor {
public:
    explicit DivergenceMonitor(double factor = 10.0, std::size_t patience = 100) : factor_(factor), patience_(patience) {}

    void observe(std::size_t step, double loss) {
        if (!std::isfinite(loss)) throw NonFiniteError("non-finite loss at step " + std::to_string(step));
        if (!init_) init_ = loss;
        run_ = loss > factor_ * *init_ ? run_ + 1 : 0;
        if (run_ >= patience_)
            throw DivergenceError("training diverged: loss " + std::to_string(loss) + " at step " + std::to_string(step) +
                                  " has exceeded 10x the initial loss " + std::to_string(*init_) + " for " +
                                  std::to_string(run_) + " steps");
    }

private:
    double factor_;
    std::size_t patience_;
    std::optional<double> init_;
    std::size_t run_ = 0;
};

/// Plain diffusion-loss training of `model` in place; returns the EMA copy alongside.
/// `on_step` (optional) sees the 1-based step and its loss.
inline TrainResult train_diffusion(ToyDiTModel model, const DiffusionTask& task, const TrainConfig& cfg,
                                   const std::function<void(std::size_t, double)>& on_step = {}) {
    if (cfg.batch == 0) throw ConfigError("batch must be positive");
    Rng rng(cfg.seed);
    DiffusionTask::Sampler sampler(task, rng.fork(11));
    std::vector<Tensor> params = model.parameters();
    AdamW opt(params, cfg.adam);
    Ema ema(params, cfg.ema_decay);
    DivergenceMonitor monitor;
    TrainResult out;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        opt.set_lr(halving_lr(cfg.adam.lr, step, cfg.steps, cfg.lr_halvings));
        const Batch b = sampler.next(cfg.batch);
        double lv;
        {
            Tape tape;
            Tensor loss = diffusion_loss(model, b);
            lv = loss.item();
            tape.backward(loss);
        }
        monitor.observe(step, lv);
        clip_grad_norm(params, cfg.grad_clip);
        opt.step();
        opt.zero_grad();
        ema.update(params);
        out.losses.push_back(lv);
        if (on_step) on_step(step, lv);
    }
    out.ema = model.clone();
    std::vector<Tensor> ep = out.ema.parameters();
    ema.copy_to(ep);
    out.model = std::move(model);
    return out;
}

inline TrainResult train_base(const ToyDiTConfig& mcfg, const DiffusionTask& task, const TrainConfig& cfg,
                              const std::function<void(std::size_t, double)>& on_step = {}) {
    Rng rng(cfg.seed);
    ToyDiTModel model = ToyDiTModel::init(mcfg, rng);
    return train_diffusion(std::move(model), task, cfg, on_step);
}

/// Checkpoint holding raw and EMA weights plus metadata.
inline CheckpointFile make_checkpoint(const TrainResult& r, nlohmann::json meta) {
    CheckpointFile ck;
    meta["model"] = r.model.config;
    ck.meta = std::move(meta);
    ck.blobs = r.model.to_blobs("model/");
    auto e = r.ema.to_blobs("ema/");
    ck.blobs.insert(ck.blobs.end(), e.begin(), e.end());
    return ck;
}

inline ToyDiTModel load_model(const CheckpointFile& ck, const std::string& prefix = "ema/") {
    return ToyDiTModel::from_blobs(ck.meta.at("model").get<ToyDiTConfig>(), ck, prefix);
}

// ---------------------------------------------------------------------------
// Sampling

/// Deterministic DDIM sampling over `sample_steps` evenly spaced timesteps; returns [n, 2] flattened.
inline std::vector<double> sample(const ToyDiTModel& model, const DiffusionTask& task, std::size_t n,
                                  std::size_t sample_steps, std::uint64_t seed, std::size_t chunk = 1024) {
    const std::size_t T = task.num_timesteps();
    if (sample_steps == 0 || sample_steps > T) throw ConfigError("sample_steps must lie in [1, num_timesteps]");
    if (model.config.num_classes > 0) throw ConfigError("sampling is implemented for unconditional models only");
    std::vector<double> out;
    if (n == 0) return out;
    out.reserve(2 * n);
    std::vector<std::size_t> ts(sample_steps);
    for (std::size_t i = 0; i < sample_steps; ++i)
        ts[i] = sample_steps == 1 ? T - 1
                                  : static_cast<std::size_t>(std::llround(static_cast<double>(i) * static_cast<double>(T - 1) /
                                                                          static_cast<double>(sample_steps - 1)));
    const auto& ab = task.alpha_bar();
    Rng rng(seed);
    NoGradGuard ng;
    for (std::size_t s = 0; s < n; s += chunk) {
        const std::size_t B = std::min(chunk, n - s);
        Tensor x = Tensor::zeros({B, 2});
        for (auto& v : x.data()) v = rng.normal();
        for (std::size_t k = sample_steps; k-- > 0;) {
            const std::size_t t = ts[k];
            const Tensor eps = forward(model, x, std::vector<std::size_t>(B, t));
            const double a = ab[t];
            const double a_prev = k == 0 ? 1.0 : ab[ts[k - 1]];
            Tensor next = Tensor::zeros({B, 2});
            for (std::size_t i = 0; i < 2 * B; ++i) {
                const double x0 = (x.data()[i] - std::sqrt(1.0 - a) * eps.data()[i]) / std::sqrt(a);
                next.data()[i] = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps.data()[i];
            }
            x = next;
        }
        out.insert(out.end(), x.data().begin(), x.data().end());
    }
    return out;
}

}  // namespace depthprune
