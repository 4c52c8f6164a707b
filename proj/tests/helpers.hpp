#pragma once
// Small models and batches shared by the test files.

#include "depthprune/toy_dit.hpp"

namespace testing_helpers {

using namespace depthprune;

inline ToyDiTConfig tiny_config(std::size_t depth = 4) {
    ToyDiTConfig c;
    c.depth = depth;
    c.hidden_dim = 8;
    c.heads = 2;
    c.mlp_ratio = 2.0;
    c.seq_len = 3;
    c.num_timesteps = 20;
    return c;
}

inline TaskConfig tiny_task() {
    TaskConfig t;
    t.train_size = 512;
    t.heldout_size = 128;
    return t;
}

/// Random init, then every parameter nudged so layer norms and biases are not at their trivial values.
inline ToyDiTModel random_model(const ToyDiTConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ToyDiTModel m = ToyDiTModel::init(cfg, rng);
    for (auto& t : m.parameters())
        for (auto& v : t.data()) v += rng.normal(0.0, 0.1);
    return m;
}

inline Batch random_batch(const DiffusionTask& task, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const auto pts = task.sample_mixture(n, rng);
    return task.make_batch(pts, std::vector<std::size_t>(n, 0), rng);
}

}  // namespace testing_helpers
