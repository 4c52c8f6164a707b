#pragma once
// Evaluation: held-out loss, sliced Wasserstein sample quality, activation statistics, throughput.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/toy_dit.hpp"

namespace depthprune {

inline double eval_loss(const ToyDiTModel& model, const DiffusionTask& task) { return evaluate_loss(model, task.heldout()); }

/// Sliced 1-Wasserstein distance between equal-size 2-D point sets (flattened [n, 2]).
inline double sliced_wasserstein(const std::vector<double>& a, const std::vector<double>& b, std::size_t projections = 64,
                                 std::uint64_t projection_seed = 4242) {
    if (a.size() != b.size() || a.size() % 2 != 0 || a.empty())
        throw DimensionError("sliced Wasserstein needs two non-empty point sets of equal size");
    const std::size_t n = a.size() / 2;
    Rng rng(projection_seed);
    std::vector<double> pa(n), pb(n);
    double total = 0.0;
    for (std::size_t p = 0; p < projections; ++p) {
        const double ang = std::numbers::pi * rng.uniform();
        const double c = std::cos(ang), s = std::sin(ang);
        for (std::size_t i = 0; i < n; ++i) {
            pa[i] = c * a[2 * i] + s * a[2 * i + 1];
            pb[i] = c * b[2 * i] + s * b[2 * i + 1];
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += std::abs(pa[i] - pb[i]);
        total += d / static_cast<double>(n);
    }
    return total / static_cast<double>(projections);
}

/// SW distance between n model samples and n fresh draws from the true mixture.
inline double sample_quality(const ToyDiTModel& model, const DiffusionTask& task, std::size_t n, std::uint64_t seed,
                             std::size_t sample_steps = 50) {
    if (n < 100) throw ConfigError("sample_quality needs n >= 100");
    const std::vector<double> gen = sample(model, task, n, sample_steps, seed);
    Rng ref_rng(seed ^ 0x5eedf00dULL);
    const std::vector<double> ref = task.sample_mixture(n, ref_rng);
    return sliced_wasserstein(gen, ref);
}

/// Fraction of points within `radius` of some mixture mode.
inline double fraction_near_modes(const std::vector<double>& pts, const DiffusionTask& task, double radius) {
    const std::size_t n = pts.size() / 2;
    if (n == 0) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < task.config().num_modes; ++k) {
            const auto c = task.mode_center(k);
            if (std::hypot(pts[2 * i] - c[0], pts[2 * i + 1] - c[1]) <= radius) {
                ++ok;
                break;
            }
        }
    }
    return static_cast<double>(ok) / static_cast<double>(n);
}

struct ActivationStat {
    double max_ratio = 0.0;  // max |x - mu| / sigma; +inf when sigma == 0
    double mean = 0.0;
    double stddev = 0.0;
    bool degenerate = false;  // sigma == 0
};

inline ActivationStat tensor_stat(std::span<const double> v) {
    ActivationStat s;
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0.0, dev = 0.0;
    for (double x : v) {
        var += (x - mu) * (x - mu);
        dev = std::max(dev, std::abs(x - mu));
    }
    s.mean = mu;
    s.stddev = std::sqrt(var / static_cast<double>(v.size()));
    s.degenerate = s.stddev == 0.0;
    s.max_ratio = s.degenerate ? std::numeric_limits<double>::infinity() : dev / s.stddev;
    return s;
}

/// Statistics of every layer's output hidden state over the batch.
inline std::vector<ActivationStat> activation_stats(const ToyDiTModel& model, const Batch& batch) {
    NoGradGuard ng;
    ForwardTrace tr;
    ForwardOptions fo;
    if (model.config.num_classes > 0) fo.labels = &batch.labels;
    forward(model, batch.x_t, batch.t, fo, &tr);
    std::vector<ActivationStat> out;
    for (const auto& h : tr.hidden) out.push_back(tensor_stat(h.data()));
    return out;
}

inline nlohmann::json to_json_value(const ActivationStat& s) {
    return {{"max_ratio", s.degenerate ? nlohmann::json(nullptr) : nlohmann::json(s.max_ratio)},
            {"mean", s.mean},
            {"std", s.stddev},
            {"degenerate", s.degenerate}};
}

// ---------------------------------------------------------------------------

struct ThroughputRow {
    std::size_t depth;
    double its;      // forward passes per second, median over trials
    double speedup;  // relative to the first depth listed
    std::size_t batch;
};

struct ThroughputReport {
    std::vector<ThroughputRow> rows;
    std::vector<std::string> notes;
};

/// Median forward throughput of randomly initialized models at each depth.
inline ThroughputReport throughput_bench(const std::vector<std::size_t>& depths, ToyDiTConfig cfg, std::size_t batch,
                                         std::size_t trials, std::uint64_t seed = 0) {
    if (trials < 5) throw ConfigError("throughput_bench needs at least 5 trials");
    if (depths.empty()) throw ConfigError("throughput_bench needs at least one depth");
    if (batch == 0) throw ConfigError("batch must be positive");
    constexpr double kMinTrialSeconds = 2e-3;
    ThroughputReport rep;
    DiffusionTask task(TaskConfig{}, cfg.num_timesteps);
    for (std::size_t depth : depths) {
        cfg.depth = depth;
        Rng rng(seed);
        const ToyDiTModel model = ToyDiTModel::init(cfg, rng);
        std::size_t b = batch;
        for (;;) {
            std::vector<double> pts = task.sample_mixture(b, rng);
            const Batch in = task.make_batch(pts, std::vector<std::size_t>(b, 0), rng);
            auto once = [&] {
                NoGradGuard ng;
                const auto t0 = std::chrono::steady_clock::now();
                forward(model, in.x_t, in.t);
                return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            };
            once();
            once();
            std::vector<double> times;
            for (std::size_t i = 0; i < trials; ++i) times.push_back(once());
            std::sort(times.begin(), times.end());
            const double med = times[times.size() / 2];
            if (med < kMinTrialSeconds && b < (1u << 16)) {
                b *= 2;
                continue;
            }
            if (b != batch) rep.notes.push_back("depth " + std::to_string(depth) + ": batch raised to " + std::to_string(b) +
                                                " for timer resolution");
            rep.rows.push_back({depth, static_cast<double>(b) / static_cast<double>(batch) / med, 0.0, b});
            break;
        }
    }
    for (auto& r : rep.rows) r.speedup = r.its / rep.rows.front().its;
    return rep;
}

inline std::string throughput_csv(const ThroughputReport& r) {
    std::ostringstream os;
    os.precision(6);
    os << "depth,its,speedup,batch\n";
    for (const auto& row : r.rows) os << row.depth << ',' << row.its << ',' << row.speedup << ',' << row.batch << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------

struct EvalReport {
    std::string model_id;
    std::size_t depth = 0;
    std::size_t parameter_count = 0;
    double heldout_loss = 0.0;
    double sw_distance = 0.0;
    std::optional<double> throughput;  // timing field, excluded from determinism comparisons
    std::vector<ActivationStat> activations;
    std::string config_hash;
    std::string task_hash;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        nlohmann::json acts = nlohmann::json::array();
        for (const auto& a : activations) acts.push_back(to_json_value(a));
        nlohmann::json j = {{"model_id", model_id},
                            {"depth", depth},
                            {"parameter_count", parameter_count},
                            {"heldout_loss", finite_or_null(heldout_loss)},
                            {"heldout_loss_finite", std::isfinite(heldout_loss)},
                            {"sw_distance", finite_or_null(sw_distance)},
                            {"sw_distance_finite", std::isfinite(sw_distance)},
                            {"activations", acts},
                            {"config_hash", config_hash},
                            {"task_hash", task_hash},
                            {"seed", seed}};
        j["timing"] = {{"throughput_its", throughput ? nlohmann::json(*throughput) : nlohmann::json(nullptr)}};
        return j;
    }

    static nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
};

struct ComparisonRow {
    std::string method;
    std::uint64_t seed;
    std::size_t depth;
    std::size_t parameter_count;
    double pruned_loss;     // before recovery
    double recovered_loss;  // after recovery
    double sw_distance;
};

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
    std::ostringstream os;
    os.precision(10);
    os << "method,seed,depth,parameter_count,pruned_loss,recovered_loss,sw_distance\n";
    for (const auto& r : rows)
        os << r.method << ',' << r.seed << ',' << r.depth << ',' << r.parameter_count << ',' << r.pruned_loss << ','
           << r.recovered_loss << ',' << r.sw_distance << '\n';
    return os.str();
}

}  // namespace depthprune
