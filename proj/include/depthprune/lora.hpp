#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "depthprune/errors.hpp"
#include "depthprune/ops.hpp"
#include "depthprune/rng.hpp"

namespace depthprune {

/// Linear maps of one transformer layer that carry a low-rank update.
enum class LinearSlot : std::size_t { Q = 0, K, V, O, Up, Down };
inline constexpr std::size_t kLinearSlots = 6;
inline constexpr std::array<const char*, kLinearSlots> kSlotNames = {"attn_q", "attn_k", "attn_v",
                                                                     "attn_o", "mlp_up", "mlp_down"};

struct LowRankPair {
    Tensor a;  // [rank, in]
    Tensor b;  // [out, rank]
};

/// Low-rank updates W + alpha * B A for every linear map of every layer.
struct LoRAAdapter {
    std::size_t rank = 8;
    double alpha = 2.0;
    std::vector<std::array<LowRankPair, kLinearSlots>> layers;

    /// B starts at zero so the adapter is initially a no-op; A ~ N(0, 1/rank).
    static LoRAAdapter create(const std::vector<std::array<std::pair<std::size_t, std::size_t>, kLinearSlots>>& dims,
                              std::size_t rank, double alpha, Rng& rng) {
        if (rank == 0) throw ConfigError("LoRA rank must be positive");
        if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
        LoRAAdapter ad;
        ad.rank = rank;
        ad.alpha = alpha;
        const double sd = 1.0 / std::sqrt(static_cast<double>(rank));
        for (const auto& layer : dims) {
            std::array<LowRankPair, kLinearSlots> maps;
            for (std::size_t s = 0; s < kLinearSlots; ++s) {
                const auto [out, in] = layer[s];
                maps[s].a = Tensor::zeros({rank, in}, true);
                for (auto& v : maps[s].a.data()) v = rng.normal(0.0, sd);
                maps[s].b = Tensor::zeros({out, rank}, true);
            }
            ad.layers.push_back(std::move(maps));
        }
        return ad;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps;
        for (const auto& layer : layers)
            for (const auto& p : layer) {
                ps.push_back(p.a);
                ps.push_back(p.b);
            }
        return ps;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    /// W + alpha * B A for one slot; differentiable in W, A and B.
    Tensor effective_weight(std::size_t layer, LinearSlot slot, const Tensor& w) const {
        const auto& p = layers.at(layer)[static_cast<std::size_t>(slot)];
        return add(w, scale(matmul(p.b, p.a), alpha));
    }
};

}  // namespace depthprune
