// depthprune: command-line driver for the pruning experiment pipeline.
//
// Exit codes: 0 success, 1 runtime failure, 2 missing stage dependency, 3 invalid configuration.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "depthprune/experiment.hpp"

using namespace depthprune;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<std::string> out;
    std::optional<std::string> method;
    std::optional<std::string> scheme;
    bool dry_run = false;
    bool force = false;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("-c,--config", f.config, "YAML experiment config")->required();
    sub->add_option("--seed", f.seed, "seed (default: first entry of `seeds`)");
    sub->add_option("--steps", f.steps, "override the step budget of this stage");
    sub->add_option("--out", f.out, "override output_dir");
    sub->add_option("--method", f.method, "pruning method");
    sub->add_option("--scheme", f.scheme, "N:M scheme, e.g. 1:2");
    sub->add_flag("--dry-run", f.dry_run, "print the resolved config and planned artifacts, then exit");
    sub->add_flag("--force", f.force, "recompute even if the artifact exists");
}

ExperimentConfig load(const Flags& f, const std::string& cmd) {
    ExperimentConfig base = ExperimentConfig::from_file(f.config);
    nlohmann::json raw = base.raw;
    if (f.out) raw["output_dir"] = *f.out;
    if (f.method) raw["prune"]["method"] = *f.method;
    if (f.scheme) raw["prune"]["scheme"] = *f.scheme;
    if (cmd == "prune-learn") raw["prune"]["method"] = "learnable";
    if (cmd == "finetune" || cmd == "distill") raw["recover"]["mode"] = cmd;
    if (f.steps) {
        if (cmd == "train-base") raw["train"]["steps"] = *f.steps;
        else if (cmd == "prune-learn") raw["prune"]["steps"] = *f.steps;
        else if (cmd == "finetune" || cmd == "distill" || cmd == "sweep" || cmd == "run-cell") raw["recover"]["steps"] = *f.steps;
        else throw ConfigKeyError("--steps", "not meaningful for " + cmd);
    }
    if (cmd == "prune-baseline" && raw["prune"]["method"] == "learnable")
        throw ConfigKeyError("prune.method", "prune-baseline needs a baseline method (use prune-learn for learnable)");
    return ExperimentConfig::from_json(raw);
}

void dry_run(const ExperimentConfig& cfg, const Stages& st, const std::string& cmd) {
    nlohmann::json plan = {{"command", cmd}, {"config_hash", cfg.config_hash()}, {"seed", st.seed}, {"resolved", cfg.raw}};
    plan["artifacts"] = {{"base_checkpoint", st.base_checkpoint().string()},
                         {"decision", st.decision_file().string()},
                         {"recover_checkpoint", st.recover_checkpoint().string()},
                         {"eval_report", st.eval_report().string()},
                         {"bench", (st.bench_dir() / "throughput.json").string()},
                         {"sweep", (st.sweep_dir() / "comparison.csv").string()}};
    std::cout << plan.dump(2) << "\n";
}

void run_cell(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& method, bool force) {
    Pipeline p(cfg, seed, method);
    p.force = force;
    p.prune();
    p.recover();
    p.evaluate();
}

int sweep(const ExperimentConfig& cfg, const Flags& f) {
    std::vector<std::uint64_t> seeds = f.seed ? std::vector<std::uint64_t>{*f.seed} : cfg.seeds;
    std::vector<std::string> methods = f.method ? std::vector<std::string>{*f.method} : cfg.sweep_methods;
    for (auto s : seeds) {
        Pipeline p(cfg, s, methods.front());
        p.force = f.force;
        p.train_base();
    }
    struct Cell {
        std::uint64_t seed;
        std::string method;
    };
    std::vector<Cell> cells;
    for (auto s : seeds)
        for (const auto& m : methods) cells.push_back({s, m});

    if (cfg.sweep_workers <= 1) {
        for (const auto& c : cells) run_cell(cfg, c.seed, c.method, f.force);
    } else {
        // independent cells in separate processes; results are merged in cell order below
        std::vector<pid_t> running;
        int failures = 0;
        auto reap = [&] {
            int status = 0;
            const pid_t pid = ::wait(&status);
            std::erase(running, pid);
            if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
        };
        for (const auto& c : cells) {
            while (running.size() >= cfg.sweep_workers) reap();
            std::vector<std::string> args = {"depthprune", "run-cell", "--config", f.config, "--seed", std::to_string(c.seed),
                                             "--method", c.method, "--out", cfg.output_dir.string()};
            if (f.steps) args.insert(args.end(), {"--steps", std::to_string(*f.steps)});
            if (f.scheme) args.insert(args.end(), {"--scheme", *f.scheme});
            if (f.force) args.emplace_back("--force");
            std::cout.flush();
            const pid_t pid = ::fork();
            if (pid == 0) {
                std::vector<char*> argv;
                for (auto& a : args) argv.push_back(a.data());
                argv.push_back(nullptr);
                ::execv("/proc/self/exe", argv.data());
                std::_Exit(127);
            }
            if (pid < 0) throw std::runtime_error("fork failed");
            running.push_back(pid);
        }
        while (!running.empty()) reap();
        if (failures) throw std::runtime_error(std::to_string(failures) + " sweep cell(s) failed");
    }

    std::vector<nlohmann::json> reports;
    for (const auto& c : cells) {
        const Stages st{cfg, c.seed, c.method};
        reports.push_back(nlohmann::json::parse(detail::read_text(st.eval_report())));
    }
    const auto rows = compare_reports(reports);
    const Stages st{cfg, seeds.front(), methods.front()};
    detail::write_text(st.sweep_dir() / "comparison.csv", detail::csv_header(cfg, seeds.front()) + comparison_csv(rows));
    std::cout << (st.sweep_dir() / "comparison.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learnable depth pruning experiments on a toy diffusion transformer"};
    app.require_subcommand(1);
    Flags f;
    const std::vector<std::pair<std::string, std::string>> cmds = {
        {"train-base", "train the unpruned teacher"},
        {"prune-learn", "learn an N:M layer mask jointly with a recoverability update"},
        {"prune-baseline", "prune with a baseline criterion (--method)"},
        {"finetune", "recover a pruned model with plain diffusion training"},
        {"distill", "recover a pruned model by distillation from the base model"},
        {"eval", "evaluate the recovered model"},
        {"bench", "forward-throughput benchmark across depths"},
        {"sweep", "methods x seeds comparison"},
        {"run-cell", "prune, recover and evaluate one (method, seed) cell"},
    };
    for (const auto& [name, help] : cmds) {
        CLI::App* sub = app.add_subcommand(name, help);
        add_common(sub, f);
        if (name == "run-cell") sub->group("");
    }
    CLI11_PARSE(app, argc, argv);
    const std::string cmd = app.get_subcommands().front()->get_name();

    try {
        const ExperimentConfig cfg = load(f, cmd);
        const std::uint64_t seed = f.seed.value_or(cfg.seeds.front());
        Pipeline p(cfg, seed, cfg.method);
        p.force = f.force;
        if (f.dry_run) {
            dry_run(cfg, p.stages(), cmd);
            return 0;
        }
        if (cmd == "train-base") std::cout << p.train_base().string() << "\n";
        else if (cmd == "prune-learn" || cmd == "prune-baseline") std::cout << p.prune().string() << "\n";
        else if (cmd == "finetune" || cmd == "distill") std::cout << p.recover().string() << "\n";
        else if (cmd == "eval") std::cout << p.evaluate().string() << "\n";
        else if (cmd == "bench") std::cout << p.bench().string() << "\n";
        else if (cmd == "run-cell") run_cell(cfg, seed, cfg.method, f.force);
        else if (cmd == "sweep") return sweep(cfg, f);
        return 0;
    } catch (const ConfigKeyError& e) {
        std::cerr << "error: invalid config key " << e.key() << ": " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: invalid config: " << e.what() << "\n";
        return 3;
    } catch (const MissingDependency& e) {
        std::cerr << "error: missing dependency " << e.path().string() << " (run the upstream stage first)\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
