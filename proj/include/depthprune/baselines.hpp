#pragma once
// Metric- and search-based layer pruning baselines evaluated on a fixed calibration set.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/mask_sampler.hpp"
#include "depthprune/recoverability.hpp"
#include "depthprune/toy_dit.hpp"

namespace depthprune {

/// Fixed examples with pre-drawn timesteps and noise, shared by every method in an experiment.
struct CalibrationSet {
    Batch batch;
    std::vector<Batch> probes;
    std::uint64_t seed = 0;

    static CalibrationSet make(const DiffusionTask& task, std::size_t size = 512, std::uint64_t seed = 99) {
        if (size == 0) throw ConfigError("calibration size must be positive");
        Rng rng(seed);
        Rng pts_rng = rng.fork(1);
        std::vector<double> pts = task.sample_mixture(size, pts_rng);
        std::vector<std::size_t> labels(size, 0);
        Rng noise_rng = rng.fork(2);
        CalibrationSet c{task.make_batch(pts, labels, noise_rng), {}, seed};
        // probes for hidden-state metrics: same points and noise at fixed mid-range timesteps
        const std::size_t T = task.num_timesteps();
        for (double frac : {0.25, 0.5, 0.75}) {
            const auto t = static_cast<std::size_t>(std::llround(frac * static_cast<double>(T - 1)));
            Batch p = c.batch;
            p.t.assign(size, t);
            p.x_t = task.noised(p.x0, p.noise, p.t);
            c.probes.push_back(std::move(p));
        }
        return c;
    }
};

inline double calibration_loss(const ToyDiTModel& model, const std::vector<double>& mask, const CalibrationSet& calib) {
    if (mask.size() != model.depth()) throw ConfigError("mask length does not match model depth");
    return evaluate_loss(model, calib.batch, mask);
}

struct MaskScore {
    std::vector<double> mask;
    double loss = 0.0;
    std::string method;

    bool finite() const { return std::isfinite(loss); }
};

struct RandomSearchResult {
    std::vector<MaskScore> scores;  // in sample order
    std::size_t min = 0, median = 0, max = 0;  // indices into scores
};

/// Uniform random masks with `keep` ones out of `depth`, or per-block N:M masks when `scheme` is given.
inline RandomSearchResult random_search(const ToyDiTModel& model, const CalibrationSet& calib, std::size_t n_samples,
                                        std::size_t keep, Rng& rng, const NMScheme* scheme = nullptr) {
    if (n_samples == 0) throw ConfigError("random search needs at least one sample");
    const std::size_t L = model.depth();
    if (!scheme && (keep == 0 || keep > L)) throw ConfigError("keep must lie in [1, depth]");
    std::vector<std::vector<int>> candidates;
    if (scheme) {
        if (scheme->depth() != L) throw ConfigError("scheme does not tile the model depth");
        candidates = enumerate_candidates(scheme->n, scheme->m);
    }
    RandomSearchResult r;
    std::map<std::vector<double>, double> memo;  // the 50% space at toy depth is tiny
    std::vector<std::size_t> idx(L);
    for (std::size_t s = 0; s < n_samples; ++s) {
        std::vector<double> mask(L, 0.0);
        if (scheme) {
            for (std::size_t k = 0; k < scheme->k; ++k) {
                const auto& row = candidates[rng.below(candidates.size())];
                for (std::size_t j = 0; j < scheme->m; ++j) mask[k * scheme->m + j] = row[j];
            }
        } else {
            std::iota(idx.begin(), idx.end(), 0);
            rng.shuffle(idx.begin(), idx.end());
            for (std::size_t j = 0; j < keep; ++j) mask[idx[j]] = 1.0;
        }
        auto it = memo.find(mask);
        if (it == memo.end()) it = memo.emplace(mask, calibration_loss(model, mask, calib)).first;
        r.scores.push_back({mask, it->second, "random"});
    }
    std::vector<std::size_t> order(n_samples);
    std::iota(order.begin(), order.end(), 0);
    auto key = [&](std::size_t i) { return r.scores[i].finite() ? r.scores[i].loss : std::numeric_limits<double>::infinity(); };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    r.min = order.front();
    r.median = order[(n_samples - 1) / 2];
    r.max = order.back();
    return r;
}

inline std::string scores_csv(const std::vector<MaskScore>& scores) {
    std::ostringstream os;
    os.precision(17);
    os << "mask,loss,method\n";
    for (const auto& s : scores) os << mask_bits(s.mask) << ',' << s.loss << ',' << s.method << '\n';
    return os.str();
}

/// Equal-width histogram of the finite losses; non-finite values are counted separately.
inline nlohmann::json loss_histogram(const std::vector<MaskScore>& scores, std::size_t bins = 20) {
    std::vector<double> v;
    std::size_t nonfinite = 0;
    for (const auto& s : scores) {
        if (s.finite()) v.push_back(s.loss);
        else ++nonfinite;
    }
    nlohmann::json j;
    j["non_finite"] = nonfinite;
    j["count"] = scores.size();
    if (v.empty()) {
        j["bin_edges"] = nlohmann::json::array();
        j["counts"] = nlohmann::json::array();
        return j;
    }
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it, hi = *hi_it;
    const double w = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
    std::vector<double> edges(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + w * static_cast<double>(i);
    std::vector<std::size_t> counts(bins, 0);
    for (double x : v) counts[std::min(bins - 1, static_cast<std::size_t>((x - lo) / w))]++;
    j["bin_edges"] = edges;
    j["counts"] = counts;
    j["min"] = lo;
    j["max"] = hi;
    return j;
}

struct LayerScores {
    std::vector<double> mask;
    std::vector<double> scores;  // per layer
};

namespace detail {

/// Mask keeping every layer except the `drop` lowest (or highest) scoring ones; ties go to the lower index.
inline std::vector<double> drop_by_score(const std::vector<double>& scores, std::size_t keep, bool drop_highest) {
    const std::size_t L = scores.size();
    if (keep == 0 || keep >= L) throw ConfigError("keep must lie in [1, depth - 1]");
    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return drop_highest ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    std::vector<double> mask(L, 1.0);
    for (std::size_t i = 0; i < L - keep; ++i) mask[order[i]] = 0.0;
    return mask;
}

/// Runs the unpruned model on every probe batch and hands each layer's (x_i, phi_i(x_i)) to
/// visit(layer, x, y) as flat spans over [tokens, d].
template <class Visit>
void visit_layer_io(const ToyDiTModel& model, const CalibrationSet& calib, Visit&& visit) {
    NoGradGuard ng;
    for (const Batch& b : calib.probes) {
        ForwardTrace tr;
        tr.record_layer_io = true;
        ForwardOptions fo;
        if (model.config.num_classes > 0) fo.labels = &b.labels;
        forward(model, b.x_t, b.t, fo, &tr);
        for (std::size_t i = 0; i < model.depth(); ++i) visit(i, tr.layer_in[i].data(), tr.layer_out[i].data());
    }
}

}  // namespace detail

/// Delta loss of removing each layer alone; drops the `depth - keep` smallest.
inline LayerScores sensitivity_prune(const ToyDiTModel& model, const CalibrationSet& calib, std::size_t keep) {
    const std::size_t L = model.depth();
    const double base = calibration_loss(model, std::vector<double>(L, 1.0), calib);
    LayerScores r;
    for (std::size_t i = 0; i < L; ++i) {
        std::vector<double> mask(L, 1.0);
        mask[i] = 0.0;
        r.scores.push_back(calibration_loss(model, mask, calib) - base);
    }
    r.mask = detail::drop_by_score(r.scores, keep, false);
    return r;
}

/// Mean token cosine similarity between x_i and phi_i(x_i); drops the most similar layers.
inline LayerScores similarity_prune(const ToyDiTModel& model, const CalibrationSet& calib, std::size_t keep) {
    const std::size_t L = model.depth(), d = model.config.hidden_dim;
    std::vector<double> sum(L, 0.0);
    std::vector<std::size_t> count(L, 0);
    detail::visit_layer_io(model, calib, [&](std::size_t i, std::span<const double> x, std::span<const double> y) {
        for (std::size_t off = 0; off < x.size(); off += d) {
            double xy = 0.0, xx = 0.0, yy = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                xy += x[off + j] * y[off + j];
                xx += x[off + j] * x[off + j];
                yy += y[off + j] * y[off + j];
            }
            sum[i] += xx == 0.0 || yy == 0.0 ? 1.0 : std::clamp(xy / std::sqrt(xx * yy), -1.0, 1.0);
            ++count[i];
        }
    });
    LayerScores r;
    for (std::size_t i = 0; i < L; ++i) r.scores.push_back(sum[i] / static_cast<double>(count[i]));
    r.mask = detail::drop_by_score(r.scores, keep, true);
    return r;
}

/// Mean token ||phi_i(x_i) - x_i||^2; drops the layers that change their input least.
inline LayerScores mse_prune(const ToyDiTModel& model, const CalibrationSet& calib, std::size_t keep) {
    const std::size_t L = model.depth(), d = model.config.hidden_dim;
    std::vector<double> sum(L, 0.0);
    std::vector<std::size_t> count(L, 0);
    detail::visit_layer_io(model, calib, [&](std::size_t i, std::span<const double> x, std::span<const double> y) {
        for (std::size_t off = 0; off < x.size(); off += d) {
            double e = 0.0;
            for (std::size_t j = 0; j < d; ++j) e += (y[off + j] - x[off + j]) * (y[off + j] - x[off + j]);
            sum[i] += e;
            ++count[i];
        }
    });
    LayerScores r;
    for (std::size_t i = 0; i < L; ++i) r.scores.push_back(sum[i] / static_cast<double>(count[i]));
    r.mask = detail::drop_by_score(r.scores, keep, false);
    return r;
}

/// Keeps the first and last layers and spreads the rest evenly: round(j (L-1) / (keep-1)).
inline std::vector<double> oracle_prune(std::size_t depth, std::size_t keep) {
    if (keep < 2) throw ConfigError("oracle pruning needs keep >= 2");
    if (keep > depth) throw ConfigError("keep exceeds depth");
    std::vector<double> mask(depth, 0.0);
    for (std::size_t j = 0; j < keep; ++j)
        mask[static_cast<std::size_t>(std::llround(static_cast<double>(j) * static_cast<double>(depth - 1) /
                                                   static_cast<double>(keep - 1)))] = 1.0;
    return mask;
}

}  // namespace depthprune
