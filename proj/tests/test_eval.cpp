#include <gtest/gtest.h>

#include <numbers>

#include "depthprune/eval.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace depthprune;
using namespace testing_helpers;

namespace {

DiffusionTask default_task() { return DiffusionTask(TaskConfig{}, 100); }

TEST(SlicedWasserstein, SelfDistanceOfTrueMixtureIsSmall) {
    const DiffusionTask task = default_task();
    Rng a(1), b(2);
    const auto x = task.sample_mixture(10000, a);
    const auto y = task.sample_mixture(10000, b);
    EXPECT_LT(sliced_wasserstein(x, y), 0.05);
    EXPECT_EQ(sliced_wasserstein(x, x), 0.0);
    EXPECT_EQ(sliced_wasserstein(x, y), sliced_wasserstein(y, x));
}

TEST(SlicedWasserstein, PointMassMatchesQuadratureOracle) {
    const DiffusionTask task = default_task();
    Rng rng(3);
    const auto mix = task.sample_mixture(4000, rng);
    const std::vector<double> origin(mix.size(), 0.0);
    const double want = oracle::sw_point_mass(mix);
    EXPECT_NEAR(sliced_wasserstein(origin, mix), want, 0.1 * want);
}

TEST(SlicedWasserstein, TranslationGivesMeanAbsoluteProjection) {
    Rng rng(4);
    std::vector<double> a(2000);
    for (auto& v : a) v = rng.normal();
    std::vector<double> b = a;
    for (std::size_t i = 0; i < b.size(); i += 2) {
        b[i] += 0.3;
        b[i + 1] -= 0.4;
    }
    // each projection shifts by |v . theta|; averaged over directions that is 2|v|/pi
    const double want = 2.0 * 0.5 / std::numbers::pi;
    EXPECT_NEAR(sliced_wasserstein(a, b, 4096), want, 0.02 * want);
    EXPECT_NEAR(sliced_wasserstein(a, b), want, 0.1 * want);
}

TEST(SlicedWasserstein, RejectsMismatchedSets) {
    EXPECT_THROW(sliced_wasserstein({0, 0}, {0, 0, 1, 1}), DimensionError);
    EXPECT_THROW(sliced_wasserstein({0, 0, 1}, {0, 0, 1}), DimensionError);
    EXPECT_THROW(sliced_wasserstein({}, {}), DimensionError);
}

TEST(SampleQuality, DeterministicAndGuarded) {
    const ToyDiTConfig cfg = tiny_config(2);
    const DiffusionTask task(tiny_task(), cfg.num_timesteps);
    const ToyDiTModel m = random_model(cfg, 5);
    const double a = sample_quality(m, task, 200, 9, 10);
    EXPECT_EQ(a, sample_quality(m, task, 200, 9, 10));
    EXPECT_TRUE(std::isfinite(a));
    EXPECT_NE(a, sample_quality(m, task, 200, 10, 10));
    EXPECT_THROW(sample_quality(m, task, 99, 9), ConfigError);
}

TEST(FractionNearModes, CentersAndFarPoints) {
    const DiffusionTask task = default_task();
    std::vector<double> pts;
    for (std::size_t k = 0; k < task.config().num_modes; ++k) {
        const auto c = task.mode_center(k);
        pts.push_back(c[0]);
        pts.push_back(c[1]);
    }
    EXPECT_EQ(fraction_near_modes(pts, task, 1e-9), 1.0);
    pts.push_back(100.0);
    pts.push_back(100.0);
    EXPECT_NEAR(fraction_near_modes(pts, task, 0.1), 8.0 / 9.0, 1e-15);
    EXPECT_EQ(fraction_near_modes({}, task, 0.1), 0.0);
}

TEST(TensorStat, MatchesIndependentRecomputation) {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> v(257);
        for (auto& x : v) x = rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 5));
        const ActivationStat s = tensor_stat(v);
        const auto [mu, sd] = oracle::moments(v);
        double dev = 0;
        for (double x : v) dev = std::max(dev, std::abs(x - mu));
        EXPECT_NEAR(s.mean, mu, 1e-10);
        EXPECT_NEAR(s.stddev, sd, 1e-10);
        EXPECT_NEAR(s.max_ratio, dev / sd, 1e-10);
        EXPECT_FALSE(s.degenerate);
    }
}

TEST(TensorStat, ConstantIsDegenerate) {
    const std::vector<double> v(50, 2.5);
    const ActivationStat s = tensor_stat(v);
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.stddev, 0.0);
    EXPECT_TRUE(std::isinf(s.max_ratio));
    EXPECT_TRUE(to_json_value(s)["max_ratio"].is_null());
    EXPECT_EQ(to_json_value(s)["degenerate"], true);
}

TEST(TensorStat, PlantedOutlierStandsOut) {
    Rng rng(7);
    std::vector<double> v(1024);
    for (auto& x : v) x = rng.normal();
    v[100] = 50.0;
    // sigma is re-estimated with the outlier included, which inflates it
    EXPECT_GE(tensor_stat(v).max_ratio, 20.0);
}

TEST(ActivationStats, OnePerLayerMatchingTrace) {
    const ToyDiTConfig cfg = tiny_config(4);
    const DiffusionTask task(tiny_task(), cfg.num_timesteps);
    const ToyDiTModel m = random_model(cfg, 8);
    const Batch b = random_batch(task, 16, 2);
    const auto stats = activation_stats(m, b);
    ASSERT_EQ(stats.size(), 4u);
    NoGradGuard ng;
    Tensor x = embed(m, b.x_t, b.t, nullptr);
    for (std::size_t i = 0; i < 4; ++i) {
        x = layer_forward(m, i, x, nullptr);
        const auto [mu, sd] = oracle::moments(x.values());
        EXPECT_NEAR(stats[i].mean, mu, 1e-10);
        EXPECT_NEAR(stats[i].stddev, sd, 1e-10);
    }
}

TEST(EvalLoss, DeterministicAndPrunedIsWorseForTrainedModel) {
    const ToyDiTConfig cfg = tiny_config(4);
    const DiffusionTask task(tiny_task(), cfg.num_timesteps);
    TrainConfig tc;
    tc.steps = 300;
    tc.batch = 32;
    tc.adam.lr = 3e-3;
    tc.seed = 1;
    const TrainResult r = train_base(cfg, task, tc);
    const double full = eval_loss(r.model, task);
    EXPECT_EQ(full, eval_loss(r.model, task));
    EXPECT_LT(full, evaluate_loss(r.model, task.heldout(), {1, 0, 1, 0}));
    EXPECT_LT(full, evaluate_loss(r.model, task.heldout(), {0, 1, 0, 1}));
}

TEST(Throughput, ValidatesArguments) {
    const ToyDiTConfig cfg = tiny_config(4);
    EXPECT_THROW(throughput_bench({4, 2}, cfg, 8, 4), ConfigError);
    EXPECT_THROW(throughput_bench({}, cfg, 8, 5), ConfigError);
    EXPECT_THROW(throughput_bench({4}, cfg, 0, 5), ConfigError);
}

TEST(Throughput, RaisesBatchForTimerResolutionAndNotesIt) {
    const ToyDiTConfig cfg = tiny_config(4);
    const ThroughputReport r = throughput_bench({2, 1}, cfg, 1, 5);
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_EQ(r.rows[0].speedup, 1.0);
    EXPECT_GT(r.rows[0].batch, 1u);
    EXPECT_FALSE(r.notes.empty());
    EXPECT_NE(r.notes[0].find("batch raised"), std::string::npos);
    for (const auto& row : r.rows) EXPECT_GT(row.its, 0.0);
    const std::string csv = throughput_csv(r);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "depth,its,speedup,batch");
}

TEST(EvalReport, FlagsNonFiniteAndSeparatesTiming) {
    EvalReport r;
    r.model_id = "m";
    r.heldout_loss = std::numeric_limits<double>::quiet_NaN();
    r.sw_distance = 0.25;
    const auto j = r.to_json();
    EXPECT_TRUE(j["heldout_loss"].is_null());
    EXPECT_EQ(j["heldout_loss_finite"], false);
    EXPECT_EQ(j["sw_distance"], 0.25);
    EXPECT_TRUE(j["timing"]["throughput_its"].is_null());
    EXPECT_FALSE(j.contains("throughput"));
    r.throughput = 12.0;
    EXPECT_EQ(r.to_json()["timing"]["throughput_its"], 12.0);
}

TEST(Comparison, CsvHasOneRowPerEntry) {
    const std::vector<ComparisonRow> rows = {{"oracle", 0, 4, 100, 1.5, 0.7, 0.2}, {"learnable", 1, 4, 100, 1.1, 0.6, 0.1}};
    const std::string csv = comparison_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,seed,depth,parameter_count,pruned_loss,recovered_loss,sw_distance");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_NE(csv.find("learnable,1,4,100,1.1,0.6,0.1"), std::string::npos);
}

}  // namespace
