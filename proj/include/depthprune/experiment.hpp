#pragma once
// Experiment configuration (YAML) and the stage pipeline behind the command-line tool.
//
// Every stage writes to <output_dir>/<stage>/<key>/ where key hashes the inputs that stage depends on, so a
// rerun with the same configuration finds its artifacts and skips the work.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "depthprune/baselines.hpp"
#include "depthprune/checkpoint.hpp"
#include "depthprune/distill.hpp"
#include "depthprune/eval.hpp"
#include "depthprune/mask_sampler.hpp"
#include "depthprune/recoverability.hpp"
#include "depthprune/toy_dit.hpp"

namespace depthprune {

namespace fs = std::filesystem;
using nlohmann::json;

/// Configuration error naming the offending key.
class ConfigKeyError : public ConfigError {
public:
    ConfigKeyError(std::string key, const std::string& what) : ConfigError(key + ": " + what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

/// A stage input that has not been produced yet.
class MissingDependency : public std::runtime_error {
public:
    explicit MissingDependency(const fs::path& p)
        : std::runtime_error("missing dependency: " + p.string()), path_(p) {}
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(const json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m = {"learnable",   "oracle",      "min-loss", "median-loss",
                                               "max-loss",    "sensitivity", "similarity", "mse"};
    return m;
}

/// Defaults for every recognised key. The YAML file may override any of them and nothing else.
inline json default_config() {
    const ToyDiTConfig mc;
    const TaskConfig tc;
    return {
        {"output_dir", "runs/default"},
        {"seeds", {0}},
        {"model", mc},
        {"task", tc},
        {"train", {{"steps", 5000}, {"batch", 128}, {"lr", 2e-4}, {"weight_decay", 0.0}, {"grad_clip", 1.0}, {"ema_decay", 0.999}}},
        {"prune",
         {{"method", "learnable"},
          {"scheme", "1:2"},
          {"strategy", "lora"},
          {"lora_rank", 8},
          {"lora_alpha", 2.0},
          {"steps", 0},  // 0 = one pass over the training set
          {"batch", 64},
          {"weight_lr", 2e-4},
          {"logits_lr", 5e-3},
          {"grad_clip", 1.0},
          {"tau_start", 4.0},
          {"tau_end", 0.1},
          {"tau_decay", "linear"},
          {"closed_gate_grad", "none"},
          {"calib_size", 512},
          {"calib_seed", 99},
          {"random_samples", 2000}}},
        {"recover",
         {{"mode", "distill"},
          {"steps", 5000},
          {"batch", 64},
          {"lr", 2e-4},
          {"lr_halvings", 4},
          {"ema_decay", 0.999},
          {"grad_clip", 1.0},
          {"alpha_kd", 0.9},
          {"alpha_diff", 0.1},
          {"beta", 1e-2},
          {"k", 2.0},
          {"centered", true},
          {"union", true}}},
        {"eval", {{"samples", 1000}, {"sample_steps", 50}, {"bench_depths", {8, 4}}, {"bench_batch", 64}, {"bench_trials", 9}}},
        {"sweep", {{"methods", {"learnable", "oracle", "min-loss", "sensitivity"}}, {"workers", 1}}},
    };
}

namespace detail {

inline json yaml_to_json_like(const YAML::Node& node, const json& like, const std::string& key) {
    try {
        if (like.is_object()) {
            if (!node.IsMap()) throw ConfigKeyError(key, "expected a mapping");
            json out = like;
            for (const auto& kv : node) {
                const std::string k = kv.first.as<std::string>();
                const std::string full = key.empty() ? k : key + "." + k;
                if (!like.contains(k)) throw ConfigKeyError(full, "unknown key");
                out[k] = yaml_to_json_like(kv.second, like[k], full);
            }
            return out;
        }
        if (like.is_array()) {
            if (!node.IsSequence()) throw ConfigKeyError(key, "expected a list");
            json out = json::array();
            const json elem = like.empty() ? json(0) : like[0];
            for (std::size_t i = 0; i < node.size(); ++i) out.push_back(yaml_to_json_like(node[i], elem, key + "[" + std::to_string(i) + "]"));
            return out;
        }
        if (!node.IsScalar()) throw ConfigKeyError(key, "expected a scalar");
        if (like.is_boolean()) return node.as<bool>();
        if (like.is_number_unsigned() || like.is_number_integer()) {
            const std::string s = node.Scalar();
            if (!s.empty() && s[0] == '-') throw ConfigKeyError(key, "must be a non-negative integer");
            return node.as<std::uint64_t>();
        }
        if (like.is_number_float()) return node.as<double>();
        return node.as<std::string>();
    } catch (const YAML::Exception&) {
        throw ConfigKeyError(key, "value has the wrong type");
    }
}

}  // namespace detail

struct ExperimentConfig {
    json raw;  // fully resolved, same shape as default_config()

    ToyDiTConfig model;
    TaskConfig task;
    TrainConfig train;
    std::string method;
    std::string scheme;
    PruneLearnConfig prune;
    std::size_t calib_size = 512;
    std::uint64_t calib_seed = 99;
    std::size_t random_samples = 2000;
    std::string recover_mode;
    DistillConfig recover;
    std::size_t eval_samples = 1000, eval_sample_steps = 50;
    std::vector<std::size_t> bench_depths;
    std::size_t bench_batch = 64, bench_trials = 9;
    std::vector<std::string> sweep_methods;
    std::size_t sweep_workers = 1;
    std::vector<std::uint64_t> seeds;
    fs::path output_dir;

    static ExperimentConfig from_yaml_text(const std::string& text) {
        YAML::Node root;
        try {
            root = YAML::Load(text);
        } catch (const YAML::Exception& e) {
            throw ConfigKeyError("<file>", std::string("YAML parse error: ") + e.what());
        }
        json j = default_config();
        if (root && !root.IsNull()) j = detail::yaml_to_json_like(root, j, "");
        return from_json(j);
    }

    static ExperimentConfig from_file(const fs::path& p) {
        std::ifstream f(p);
        if (!f) throw ConfigKeyError("<file>", "cannot read config " + p.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return from_yaml_text(ss.str());
    }

    static ExperimentConfig from_json(const json& j) {
        ExperimentConfig c;
        c.raw = j;
        c.resolve();
        return c;
    }

    /// Rebuilds typed fields from `raw` and validates them.
    void resolve() {
        const json& j = raw;
        auto get = [&](const char* sec, const char* k) -> const json& { return j.at(sec).at(k); };
        model = j.at("model").get<ToyDiTConfig>();
        try {
            model.validate();
        } catch (const ConfigError& e) {
            throw ConfigKeyError("model", e.what());
        }
        task = j.at("task").get<TaskConfig>();
        if (model.in_dim != 2) throw ConfigKeyError("model.in_dim", "the synthetic task is two-dimensional");
        if (task.num_modes == 0) throw ConfigKeyError("task.num_modes", "must be positive");
        if (task.train_size == 0) throw ConfigKeyError("task.train_size", "must be positive");
        if (task.heldout_size == 0) throw ConfigKeyError("task.heldout_size", "must be positive");
        if (!(task.beta_start > 0.0 && task.beta_end >= task.beta_start && task.beta_end < 1.0))
            throw ConfigKeyError("task.beta_end", "need 0 < beta_start <= beta_end < 1");

        train.steps = get("train", "steps");
        train.batch = get("train", "batch");
        train.adam.lr = get("train", "lr");
        train.adam.weight_decay = get("train", "weight_decay");
        train.grad_clip = get("train", "grad_clip");
        train.ema_decay = get("train", "ema_decay");
        if (train.batch == 0) throw ConfigKeyError("train.batch", "must be positive");
        if (!(train.ema_decay >= 0.0 && train.ema_decay < 1.0)) throw ConfigKeyError("train.ema_decay", "must lie in [0, 1)");

        method = get("prune", "method");
        if (std::find(known_methods().begin(), known_methods().end(), method) == known_methods().end())
            throw ConfigKeyError("prune.method", "unknown method '" + method + "'");
        scheme = get("prune", "scheme");
        NMScheme s;
        try {
            s = NMScheme::parse(scheme, model.depth);
        } catch (const ConfigError& e) {
            throw ConfigKeyError("prune.scheme", e.what());
        }
        prune.n = s.n;
        prune.m = s.m;
        try {
            prune.strategy = parse_strategy(get("prune", "strategy"));
        } catch (const ConfigError& e) {
            throw ConfigKeyError("prune.strategy", e.what());
        }
        prune.lora_rank = get("prune", "lora_rank");
        if (prune.lora_rank == 0) throw ConfigKeyError("prune.lora_rank", "must be positive");
        prune.lora_alpha = get("prune", "lora_alpha");
        if (!(prune.lora_alpha > 0.0)) throw ConfigKeyError("prune.lora_alpha", "must be positive");
        const std::size_t psteps = get("prune", "steps");
        prune.batch = get("prune", "batch");
        if (prune.batch == 0) throw ConfigKeyError("prune.batch", "must be positive");
        prune.steps = psteps == 0 ? std::max<std::size_t>(1, task.train_size / prune.batch) : psteps;
        prune.weight_lr = get("prune", "weight_lr");
        prune.logits_lr = get("prune", "logits_lr");
        prune.grad_clip = get("prune", "grad_clip");
        prune.tau_start = get("prune", "tau_start");
        prune.tau_end = get("prune", "tau_end");
        try {
            prune.tau_decay = TemperatureSchedule::parse_decay(get("prune", "tau_decay"));
        } catch (const ConfigError& e) {
            throw ConfigKeyError("prune.tau_decay", e.what());
        }
        try {
            prune.closed_gate_grad = parse_closed_gate_grad(get("prune", "closed_gate_grad"));
        } catch (const ConfigError& e) {
            throw ConfigKeyError("prune.closed_gate_grad", e.what());
        }
        if (prune.strategy == UpdateStrategy::Frozen && prune.weight_lr > 0.0)
            throw ConfigKeyError("prune.weight_lr", "must be 0 when prune.strategy is frozen");
        if (!(prune.tau_start > 0.0)) throw ConfigKeyError("prune.tau_start", "must be positive");
        if (!(prune.tau_end > 0.0 && prune.tau_end <= prune.tau_start))
            throw ConfigKeyError("prune.tau_end", "must be positive and at most tau_start");
        calib_size = get("prune", "calib_size");
        if (calib_size == 0) throw ConfigKeyError("prune.calib_size", "must be positive");
        calib_seed = get("prune", "calib_seed");
        random_samples = get("prune", "random_samples");
        if (random_samples == 0) throw ConfigKeyError("prune.random_samples", "must be positive");

        recover_mode = get("recover", "mode");
        if (recover_mode != "finetune" && recover_mode != "distill")
            throw ConfigKeyError("recover.mode", "must be finetune or distill");
        recover.steps = get("recover", "steps");
        recover.batch = get("recover", "batch");
        recover.lr = get("recover", "lr");
        recover.lr_halvings = get("recover", "lr_halvings");
        recover.ema_decay = get("recover", "ema_decay");
        recover.grad_clip = get("recover", "grad_clip");
        recover.alpha_kd = get("recover", "alpha_kd");
        recover.alpha_diff = get("recover", "alpha_diff");
        recover.beta0 = get("recover", "beta");
        recover.k = get("recover", "k");
        recover.centered = get("recover", "centered");
        recover.union_mask = get("recover", "union");
        if (recover.batch == 0) throw ConfigKeyError("recover.batch", "must be positive");
        if (!(recover.k > 0.0)) throw ConfigKeyError("recover.k", "must be positive");
        if (!(recover.alpha_kd >= 0.0 && recover.alpha_diff >= 0.0 && recover.alpha_kd + recover.alpha_diff > 0.0))
            throw ConfigKeyError("recover.alpha_kd", "alpha_kd + alpha_diff must be positive");
        if (recover.beta0 < 0.0) throw ConfigKeyError("recover.beta", "must be non-negative");
        if (!(recover.ema_decay >= 0.0 && recover.ema_decay < 1.0)) throw ConfigKeyError("recover.ema_decay", "must lie in [0, 1)");

        eval_samples = get("eval", "samples");
        if (eval_samples < 100) throw ConfigKeyError("eval.samples", "must be at least 100");
        eval_sample_steps = get("eval", "sample_steps");
        if (eval_sample_steps == 0 || eval_sample_steps > model.num_timesteps)
            throw ConfigKeyError("eval.sample_steps", "must lie in [1, model.num_timesteps]");
        bench_depths = get("eval", "bench_depths").get<std::vector<std::size_t>>();
        if (bench_depths.empty()) throw ConfigKeyError("eval.bench_depths", "must not be empty");
        for (auto d : bench_depths)
            if (d == 0) throw ConfigKeyError("eval.bench_depths", "depths must be positive");
        bench_batch = get("eval", "bench_batch");
        if (bench_batch == 0) throw ConfigKeyError("eval.bench_batch", "must be positive");
        bench_trials = get("eval", "bench_trials");
        if (bench_trials < 5) throw ConfigKeyError("eval.bench_trials", "must be at least 5");

        sweep_methods = get("sweep", "methods").get<std::vector<std::string>>();
        for (const auto& m : sweep_methods)
            if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
                throw ConfigKeyError("sweep.methods", "unknown method '" + m + "'");
        sweep_workers = get("sweep", "workers");
        if (sweep_workers == 0) throw ConfigKeyError("sweep.workers", "must be positive");

        seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (seeds.empty()) throw ConfigKeyError("seeds", "must list at least one seed");
        output_dir = j.at("output_dir").get<std::string>();
    }

    /// Semantic content of the experiment: everything except where outputs go and how a sweep is scheduled.
    json semantic() const {
        json j = raw;
        j.erase("output_dir");
        j["sweep"].erase("workers");
        return j;
    }
    std::string config_hash() const { return hash_hex(semantic()); }
    std::string task_hash() const { return hash_hex({{"task", raw.at("task")}, {"num_timesteps", model.num_timesteps}}); }

    std::size_t keep() const { return prune.n * model.depth / prune.m; }
};

// ---------------------------------------------------------------------------
// Stage layout

struct Stages {
    const ExperimentConfig& cfg;
    std::uint64_t seed;
    std::string method;

    json base_inputs() const { return {{"model", cfg.raw.at("model")}, {"task", cfg.raw.at("task")}, {"train", cfg.raw.at("train")}, {"seed", seed}}; }
    json prune_inputs() const {
        json p = cfg.raw.at("prune");
        p["method"] = method;
        p["resolved_steps"] = cfg.prune.steps;
        return {{"base", hash_hex(base_inputs())}, {"prune", p}, {"seed", seed}};
    }
    json recover_inputs() const { return {{"prune", hash_hex(prune_inputs())}, {"recover", cfg.raw.at("recover")}}; }
    json eval_inputs() const { return {{"recover", hash_hex(recover_inputs())}, {"eval", cfg.raw.at("eval")}}; }

    std::string prune_stage() const { return method == "learnable" ? "prune-learn" : "prune-baseline"; }

    fs::path base_dir() const { return cfg.output_dir / "train-base" / hash_hex(base_inputs()); }
    fs::path prune_dir() const { return cfg.output_dir / prune_stage() / hash_hex(prune_inputs()); }
    fs::path recover_dir() const { return cfg.output_dir / cfg.recover_mode / hash_hex(recover_inputs()); }
    fs::path eval_dir() const { return cfg.output_dir / "eval" / hash_hex(eval_inputs()); }
    fs::path bench_dir() const {
        return cfg.output_dir / "bench" / hash_hex({{"model", cfg.raw.at("model")}, {"eval", cfg.raw.at("eval")}, {"seed", seed}});
    }
    fs::path sweep_dir() const { return cfg.output_dir / "sweep" / cfg.config_hash(); }

    fs::path base_checkpoint() const { return base_dir() / "checkpoint.tfck"; }
    fs::path decision_file() const { return prune_dir() / "decision.json"; }
    fs::path recover_checkpoint() const { return recover_dir() / "checkpoint.tfck"; }
    fs::path eval_report() const { return eval_dir() / "report.json"; }
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + p.string());
        f << s;
    }
    fs::rename(tmp, p);
}

inline std::string read_text(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw MissingDependency(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void require(const fs::path& p) {
    if (!fs::exists(p)) throw MissingDependency(p);
}

inline std::string csv_header(const ExperimentConfig& c, std::uint64_t seed) {
    return "# config_hash=" + c.config_hash() + " seed=" + std::to_string(seed) + "\n";
}

inline json stamp(const ExperimentConfig& c, std::uint64_t seed) {
    return {{"config_hash", c.config_hash()}, {"task_hash", c.task_hash()}, {"seed", seed}};
}

inline void save_checkpoint_atomic(const fs::path& p, const CheckpointFile& ck) {
    fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    save_checkpoint(tmp, ck);
    fs::rename(tmp, p);
}

}  // namespace detail

/// Runs pipeline stages; each returns the path of its main artifact and skips work already on disk.
class Pipeline {
public:
    Pipeline(const ExperimentConfig& cfg, std::uint64_t seed, std::string method, std::ostream& log = std::cerr)
        : cfg_(cfg), st_{cfg, seed, std::move(method)}, log_(log), task_(cfg.task, cfg.model.num_timesteps) {}

    const Stages& stages() const { return st_; }
    const DiffusionTask& task() const { return task_; }
    bool force = false;

    fs::path train_base() {
        const fs::path out = st_.base_checkpoint();
        if (fresh(out)) return out;
        TrainConfig tc = cfg_.train;
        tc.seed = st_.seed;
        Rng rng(tc.seed);
        const ToyDiTModel init = ToyDiTModel::init(cfg_.model, rng);
        const double init_loss = eval_loss(init, task_);
        TrainResult r = train_diffusion(init.clone(), task_, tc);
        const double final_loss = eval_loss(r.ema, task_);
        json meta = detail::stamp(cfg_, st_.seed);
        meta["kind"] = "base";
        meta["step"] = tc.steps;
        meta["ema_decay"] = tc.ema_decay;
        meta["train"] = cfg_.raw.at("train");
        meta["task"] = cfg_.raw.at("task");
        detail::save_checkpoint_atomic(out, make_checkpoint(r, meta));
        json metrics = detail::stamp(cfg_, st_.seed);
        metrics["init_heldout_loss"] = init_loss;
        metrics["heldout_loss"] = final_loss;
        metrics["steps"] = tc.steps;
        detail::write_text(st_.base_dir() / "metrics.json", metrics.dump(2) + "\n");
        log_ << "train-base: held-out loss " << init_loss << " -> " << final_loss << "\n";
        return out;
    }

    ToyDiTModel base_model() const {
        detail::require(st_.base_checkpoint());
        return load_model(load_checkpoint(st_.base_checkpoint()));
    }

    /// prune-learn for the learnable method, prune-baseline otherwise.
    fs::path prune() {
        const fs::path out = st_.decision_file();
        if (fresh(out)) return out;
        const ToyDiTModel base = base_model();
        json dj;
        if (st_.method == "learnable") {
            PruneLearnConfig pc = cfg_.prune;
            pc.seed = st_.seed;
            const LearnResult r = learn_pruning(base, task_, pc);
            dj = r.decision;
            CheckpointFile ck;
            ck.meta = detail::stamp(cfg_, st_.seed);
            ck.meta["kind"] = "mask_logits";
            ck.meta["prune"] = pc;
            ck.blobs.push_back({"mask_logits", r.dist.logits.shape(), r.dist.logits.values()});
            detail::save_checkpoint_atomic(st_.prune_dir() / "mask_logits.tfck", ck);
            detail::write_text(st_.prune_dir() / "log.csv", detail::csv_header(cfg_, st_.seed) + prune_log_csv(r));
        } else {
            dj = baseline_decision(base);
        }
        json stamped = detail::stamp(cfg_, st_.seed);
        stamped["method"] = st_.method;
        stamped.update(dj);
        detail::write_text(out, stamped.dump(2) + "\n");
        log_ << st_.prune_stage() << " (" << st_.method << "): retained " << stamped["retained_layers"].dump() << "\n";
        return out;
    }

    PruneDecision decision() const { return decision_from_json(json::parse(detail::read_text(st_.decision_file()))); }

    /// finetune or distill according to recover.mode.
    fs::path recover() {
        const fs::path out = st_.recover_checkpoint();
        if (fresh(out)) return out;
        const ToyDiTModel base = base_model();
        const PruneDecision d = decision();
        ToyDiTModel student = apply_decision(base, d);
        DistillConfig rc = cfg_.recover;
        rc.seed = st_.seed;
        TrainResult r;
        std::string csv;
        if (cfg_.recover_mode == "distill") {
            DistillResult dr = distill_finetune(std::move(student), base, task_, rc, &d);
            csv = distill_log_csv(dr);
            r = std::move(dr.train);
        } else {
            std::ostringstream os;
            os.precision(17);
            os << "step,loss,lr\n";
            r = finetune(std::move(student), task_, rc, [&](std::size_t s, double l) {
                os << s << ',' << l << ',' << halving_lr(rc.lr, s, rc.steps, rc.lr_halvings) << '\n';
            });
            csv = os.str();
        }
        json meta = detail::stamp(cfg_, st_.seed);
        meta["kind"] = cfg_.recover_mode;
        meta["method"] = st_.method;
        meta["step"] = rc.steps;
        meta["ema_decay"] = rc.ema_decay;
        meta["retained_layers"] = d.retained_layers;
        detail::save_checkpoint_atomic(out, make_checkpoint(r, meta));
        detail::write_text(st_.recover_dir() / "log.csv", detail::csv_header(cfg_, st_.seed) + csv);
        log_ << cfg_.recover_mode << " (" << st_.method << "): done\n";
        return out;
    }

    fs::path evaluate() {
        const fs::path out = st_.eval_report();
        if (fresh(out)) return out;
        detail::require(st_.recover_checkpoint());
        const CheckpointFile ck = load_checkpoint(st_.recover_checkpoint());
        const ToyDiTModel model = load_model(ck);
        const ToyDiTModel base = base_model();
        const PruneDecision d = decision();
        EvalReport rep;
        rep.model_id = st_.method + "/" + cfg_.recover_mode;
        rep.depth = model.depth();
        rep.parameter_count = 0;
        for (const auto& b : ck.blobs)
            if (b.name.rfind("ema/", 0) == 0) rep.parameter_count += b.values.size();
        rep.heldout_loss = eval_loss(model, task_);
        rep.sw_distance = sample_quality(model, task_, cfg_.eval_samples, st_.seed, cfg_.eval_sample_steps);
        rep.activations = activation_stats(model, calib_batch());
        rep.config_hash = cfg_.config_hash();
        rep.task_hash = cfg_.task_hash();
        rep.seed = st_.seed;
        json j = rep.to_json();
        j["method"] = st_.method;
        j["pruned_loss"] = EvalReport::finite_or_null(evaluate_loss(base, task_.heldout(), d.mask(base.depth())));
        j["base_heldout_loss"] = eval_loss(base, task_);
        j["retained_layers"] = d.retained_layers;
        detail::write_text(out, j.dump(2) + "\n");
        log_ << "eval (" << st_.method << "): held-out " << rep.heldout_loss << ", SW " << rep.sw_distance << "\n";
        return out;
    }

    fs::path bench() {
        const ThroughputReport r = throughput_bench(cfg_.bench_depths, cfg_.model, cfg_.bench_batch, cfg_.bench_trials, st_.seed);
        json j = detail::stamp(cfg_, st_.seed);
        j["rows"] = json::array();
        for (const auto& row : r.rows)
            j["rows"].push_back({{"depth", row.depth}, {"its", row.its}, {"speedup", row.speedup}, {"batch", row.batch}});
        j["notes"] = r.notes;
        detail::write_text(st_.bench_dir() / "throughput.json", j.dump(2) + "\n");
        detail::write_text(st_.bench_dir() / "throughput.csv", detail::csv_header(cfg_, st_.seed) + throughput_csv(r));
        for (const auto& row : r.rows) log_ << "bench: depth " << row.depth << " " << row.its << " it/s, speedup " << row.speedup << "\n";
        return st_.bench_dir() / "throughput.json";
    }

private:
    bool fresh(const fs::path& p) {
        if (force || !fs::exists(p)) return false;
        log_ << "up to date: " << p.string() << "\n";
        return true;
    }

    Batch calib_batch() const { return CalibrationSet::make(task_, cfg_.calib_size, cfg_.calib_seed).batch; }

    json baseline_decision(const ToyDiTModel& base) {
        const CalibrationSet calib = CalibrationSet::make(task_, cfg_.calib_size, cfg_.calib_seed);
        const std::size_t keep = cfg_.keep();
        const std::string& m = st_.method;
        std::vector<double> mask;
        json extra = json::object();
        std::vector<MaskScore> scores;
        if (m == "oracle") {
            mask = oracle_prune(base.depth(), keep);
        } else if (m == "min-loss" || m == "median-loss" || m == "max-loss") {
            Rng rng(st_.seed);
            Rng search_rng = rng.fork(31);
            const RandomSearchResult r = random_search(base, calib, cfg_.random_samples, keep, search_rng);
            const std::size_t pick = m == "min-loss" ? r.min : m == "median-loss" ? r.median : r.max;
            mask = r.scores[pick].mask;
            detail::write_text(st_.prune_dir() / "histogram.json",
                               [&] { json h = loss_histogram(r.scores); h.update(detail::stamp(cfg_, st_.seed)); return h.dump(2) + "\n"; }());
            scores = r.scores;
            extra["selected_loss"] = EvalReport::finite_or_null(r.scores[pick].loss);
        } else {
            const LayerScores ls = m == "sensitivity" ? sensitivity_prune(base, calib, keep)
                                   : m == "similarity" ? similarity_prune(base, calib, keep)
                                                       : mse_prune(base, calib, keep);
            mask = ls.mask;
            extra["layer_scores"] = ls.scores;
        }
        scores.push_back({mask, calibration_loss(base, mask, calib), m});
        detail::write_text(st_.prune_dir() / "scores.csv", detail::csv_header(cfg_, st_.seed) + scores_csv(scores));
        json dj = global_decision(mask);
        dj["calibration_loss"] = EvalReport::finite_or_null(scores.back().loss);
        dj.update(extra);
        return dj;
    }

    const ExperimentConfig& cfg_;
    Stages st_;
    std::ostream& log_;
    DiffusionTask task_;
};

/// Comparison rows from eval reports; refuses reports whose task definitions differ.
inline std::vector<ComparisonRow> compare_reports(const std::vector<json>& reports) {
    std::vector<ComparisonRow> rows;
    for (const auto& r : reports) {
        if (r.at("task_hash") != reports.front().at("task_hash"))
            throw ConfigKeyError("task", "reports were produced under different task definitions");
        auto num = [&](const char* k) { return r.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : r.at(k).get<double>(); };
        rows.push_back({r.at("method").get<std::string>(), r.at("seed").get<std::uint64_t>(), r.at("depth").get<std::size_t>(),
                        r.at("parameter_count").get<std::size_t>(), num("pruned_loss"), num("heldout_loss"), num("sw_distance")});
    }
    return rows;
}

}  // namespace depthprune
