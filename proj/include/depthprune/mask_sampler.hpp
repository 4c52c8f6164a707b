#pragma once
// N:M layer-mask enumeration and Gumbel-Softmax sampling with straight-through gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/errors.hpp"
#include "depthprune/ops.hpp"
#include "depthprune/rng.hpp"

namespace depthprune {

class OverflowError : public std::overflow_error {
public:
    explicit OverflowError(const std::string& what) : std::overflow_error(what) {}
};

/// C(n, k) exactly, or OverflowError if it does not fit in 64 bits.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    unsigned __int128 r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;  // exact: r * (n-k+i) is divisible by i at every step
        if (r > std::numeric_limits<std::uint64_t>::max())
            throw OverflowError("C(" + std::to_string(n) + "," + std::to_string(k) + ") exceeds 64 bits");
    }
    return static_cast<std::uint64_t>(r);
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    unsigned __int128 r = static_cast<unsigned __int128>(a) * b;
    if (r > std::numeric_limits<std::uint64_t>::max()) throw OverflowError("search-space size exceeds 64 bits");
    return static_cast<std::uint64_t>(r);
}

struct NMScheme {
    std::size_t n = 1;  // kept per block
    std::size_t m = 2;  // block length
    std::size_t k = 1;  // blocks

    static NMScheme for_depth(std::size_t n, std::size_t m, std::size_t depth) {
        if (m == 0 || depth % m != 0)
            throw ConfigError("scheme " + std::to_string(n) + ":" + std::to_string(m) + " does not tile depth " + std::to_string(depth));
        NMScheme s{n, m, depth / m};
        s.validate();
        return s;
    }

    /// Parses "N:M".
    static NMScheme parse(const std::string& text, std::size_t depth) {
        const auto colon = text.find(':');
        if (colon == std::string::npos) throw ConfigError("scheme must look like N:M, got '" + text + "'");
        std::size_t n = 0, m = 0;
        try {
            n = std::stoul(text.substr(0, colon));
            m = std::stoul(text.substr(colon + 1));
        } catch (const std::exception&) {
            throw ConfigError("scheme must look like N:M, got '" + text + "'");
        }
        return for_depth(n, m, depth);
    }

    void validate() const {
        if (!(n > 0 && n < m)) throw ConfigError("scheme requires 0 < N < M");
        if (k == 0) throw ConfigError("scheme requires at least one block");
    }

    std::size_t depth() const { return k * m; }
    std::size_t kept() const { return k * n; }
    std::string str() const { return std::to_string(n) + ":" + std::to_string(m); }

    friend bool operator==(const NMScheme&, const NMScheme&) = default;
};

/// All C(M, N) binary rows with N ones, descending lexicographic order.
inline std::vector<std::vector<int>> enumerate_candidates(std::size_t n, std::size_t m) {
    if (!(n > 0 && n < m)) throw ConfigError("candidate enumeration requires 0 < N < M");
    if (m > 20) throw ConfigError("candidate enumeration limited to M <= 20");
    std::vector<int> row(m, 0);
    std::fill(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n), 1);
    std::vector<std::vector<int>> rows;
    do rows.push_back(row);
    while (std::prev_permutation(row.begin(), row.end()));
    return rows;
}

/// Independent-block count C(M,N)^K.
inline std::uint64_t search_space_size(const NMScheme& s) {
    const std::uint64_t c = binomial(s.m, s.n);
    std::uint64_t r = 1;
    for (std::size_t i = 0; i < s.k; ++i) r = checked_mul(r, c);
    return r;
}

/// Unconstrained choice of `keep` layers out of `depth`.
inline std::uint64_t search_space_size(std::size_t depth, std::size_t keep) { return binomial(depth, keep); }

/// C(M,N) * K: the count of block-level patterns summed over blocks rather than multiplied.
inline std::uint64_t block_pattern_count(const NMScheme& s) { return checked_mul(binomial(s.m, s.n), s.k); }

// ---------------------------------------------------------------------------

struct TemperatureSchedule {
    enum class Decay { Linear, Exponential };
    double start = 4.0;
    double end = 0.1;
    std::size_t total_steps = 1;
    Decay decay = Decay::Linear;

    void validate() const {
        if (!(start > 0.0 && end > 0.0)) throw ConfigError("temperatures must be positive");
        if (end > start) throw ConfigError("temperature must not increase (tau_end <= tau_start)");
    }

    double operator()(std::size_t step) const {
        if (total_steps == 0 || step >= total_steps) return total_steps == 0 && step == 0 ? start : end;
        const double f = static_cast<double>(step) / static_cast<double>(total_steps);
        if (decay == Decay::Linear) return start + (end - start) * f;
        return start * std::pow(end / start, f);
    }

    static Decay parse_decay(const std::string& s) {
        if (s == "linear") return Decay::Linear;
        if (s == "exponential") return Decay::Exponential;
        throw ConfigError("temperature decay must be linear or exponential, got '" + s + "'");
    }
};

/// Per-block categorical logits over candidate masks, uniform at start.
struct MaskDistribution {
    NMScheme scheme;
    std::vector<std::vector<int>> candidates;
    Tensor logits;  // [K, C]

    static MaskDistribution uniform(const NMScheme& s) {
        s.validate();
        MaskDistribution d;
        d.scheme = s;
        d.candidates = enumerate_candidates(s.n, s.m);
        d.logits = Tensor::zeros({s.k, d.candidates.size()}, true);
        return d;
    }

    std::size_t num_candidates() const { return candidates.size(); }

    std::vector<double> probs(std::size_t block) const {
        const std::size_t C = num_candidates();
        const auto row = logits.data().subspan(block * C, C);
        const double mx = *std::max_element(row.begin(), row.end());
        std::vector<double> p(C);
        double z = 0.0;
        for (std::size_t i = 0; i < C; ++i) z += p[i] = std::exp(row[i] - mx);
        for (auto& v : p) v /= z;
        return p;
    }

    double entropy(std::size_t block) const {
        double h = 0.0;
        for (double p : probs(block))
            if (p > 0.0) h -= p * std::log(p);
        return h;
    }

    /// Candidate matrix as a [C, M] tensor.
    Tensor candidate_tensor() const {
        std::vector<double> v;
        for (const auto& r : candidates)
            for (int b : r) v.push_back(b);
        return Tensor::from({candidates.size(), scheme.m}, std::move(v));
    }
};

struct BlockSample {
    std::size_t choice = 0;
    Tensor y;                    // [1, C], hard one-hot forward, relaxed gradient
    Tensor mask;                 // [1, M] = y^T candidates
    std::vector<double> soft;    // relaxed softmax((g + log p) / tau)
};

/// Samples one block with the given Gumbel noise (length C).
inline BlockSample sample_block_with_noise(const MaskDistribution& dist, std::size_t block, double tau,
                                           const std::vector<double>& gumbel) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    const std::size_t C = dist.num_candidates();
    if (gumbel.size() != C) throw DimensionError("gumbel noise length must equal the candidate count");
    const Tensor row = gather_rows(dist.logits, {block});
    const Tensor logp = log_softmax(row);
    const Tensor z = scale(add(logp, Tensor::from({1, C}, gumbel)), 1.0 / tau);
    BlockSample s;
    const Tensor soft = softmax(z, 1);
    s.soft = soft.values();
    // argmax of g + log p, lowest index on ties
    std::size_t best = 0;
    for (std::size_t i = 1; i < C; ++i)
        if (z.data()[i] > z.data()[best]) best = i;
    s.choice = best;
    std::vector<double> hard(C, 0.0);
    hard[best] = 1.0;
    s.y = straight_through(hard, soft);
    s.mask = matmul(s.y, dist.candidate_tensor());
    return s;
}

inline BlockSample sample_block(const MaskDistribution& dist, std::size_t block, double tau, Rng& rng) {
    std::vector<double> g(dist.num_candidates());
    for (auto& v : g) v = rng.gumbel();
    return sample_block_with_noise(dist, block, tau, g);
}

struct MaskSample {
    std::vector<std::size_t> choices;   // per block
    std::vector<double> gates;          // per layer, binary
    std::vector<double> soft_gates;     // per layer, relaxed expectation under the soft one-hot
    std::vector<Tensor> gate_tensors;   // per layer [1], differentiable wrt logits
};

/// K independent block samples concatenated into a per-layer gate vector.
inline MaskSample sample_full(const MaskDistribution& dist, double tau, Rng& rng) {
    MaskSample out;
    const auto& s = dist.scheme;
    for (std::size_t k = 0; k < s.k; ++k) {
        BlockSample b = sample_block(dist, k, tau, rng);
        out.choices.push_back(b.choice);
        for (std::size_t j = 0; j < s.m; ++j) {
            out.gates.push_back(b.mask.data()[j]);
            double sg = 0.0;
            for (std::size_t c = 0; c < dist.num_candidates(); ++c) sg += b.soft[c] * dist.candidates[c][j];
            out.soft_gates.push_back(sg);
            out.gate_tensors.push_back(select(b.mask, j));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

struct PruneDecision {
    NMScheme scheme;
    std::size_t depth = 0;  // depth of the model the decision was made for
    std::vector<std::size_t> per_block_choice;
    std::vector<std::size_t> retained_layers;
    std::vector<double> confidences;

    /// Binary gate vector of length depth.
    std::vector<double> mask(std::size_t depth) const {
        std::vector<double> m(depth, 0.0);
        for (auto i : retained_layers) m.at(i) = 1.0;
        return m;
    }
};

inline std::vector<std::size_t> retained_from_choices(const NMScheme& s, const std::vector<std::vector<int>>& candidates,
                                                      const std::vector<std::size_t>& choices) {
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < s.k; ++k)
        for (std::size_t j = 0; j < s.m; ++j)
            if (candidates.at(choices.at(k))[j]) kept.push_back(k * s.m + j);
    return kept;
}

/// Per-block argmax of the logits (lowest index on ties).
inline PruneDecision decide(const MaskDistribution& dist) {
    PruneDecision d;
    d.scheme = dist.scheme;
    d.depth = dist.scheme.depth();
    const std::size_t C = dist.num_candidates();
    for (std::size_t k = 0; k < dist.scheme.k; ++k) {
        const auto row = dist.logits.data().subspan(k * C, C);
        std::size_t best = 0;
        for (std::size_t i = 1; i < C; ++i)
            if (row[i] > row[best]) best = i;
        d.per_block_choice.push_back(best);
        d.confidences.push_back(dist.probs(k)[best]);
    }
    d.retained_layers = retained_from_choices(dist.scheme, dist.candidates, d.per_block_choice);
    return d;
}

inline void to_json(nlohmann::json& j, const PruneDecision& d) {
    j = {{"scheme", d.per_block_choice.empty() ? "global" : d.scheme.str()},
         {"depth", d.depth},
         {"per_block_choice", d.per_block_choice},
         {"retained_layers", d.retained_layers},
         {"confidences", d.confidences}};
}

}  // namespace depthprune
