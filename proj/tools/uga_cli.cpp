// uga: command-line entry point for every pipeline stage, the full oracle
// simulation and the review service.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "uga/loop.hpp"
#include "uga/service.hpp"
#include "uga/stages.hpp"

namespace {

using namespace uga;

ExperimentConfig config_or_default(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    return experiment_config_from_json(read_json_file(path));
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("--seeds: '" + item + "' is not an unsigned integer");
        }
    }
    if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
    return seeds;
}

Strategy parse_strategy(const std::string& s) {
    if (s == "uga") return Strategy::uga;
    if (s == "random") return Strategy::random;
    throw ConfigError("--strategy: expected uga or random");
}

void print_round(const RoundRecord& r) {
    if (r.status != "done") {
        std::printf("seed %llu  %-12s error: %s\n", static_cast<unsigned long long>(r.seed), r.name().c_str(),
                    r.error.c_str());
    } else {
        std::printf("seed %llu  %-12s dice %.4f  (%.1f s)\n", static_cast<unsigned long long>(r.seed), r.name().c_str(),
                    r.report.overall.mean, r.duration_seconds);
    }
    std::fflush(stdout);
}

void print_report(const std::string& name, const StratifiedReport& r) {
    std::printf("%s: dice %.4f +- %.4f over %zu test slides\n", name.c_str(), r.overall.mean, r.overall.std, r.overall.n);
    for (const auto& [c, s] : r.per_center) {
        const auto u = r.uncertainty_by_center.find(c);
        std::printf("  center %d  dice %.4f  uncertainty %.5f\n", c, s.mean,
                    u == r.uncertainty_by_center.end() ? 0.0 : u->second);
    }
    for (const auto& [c, s] : r.per_class) std::printf("  %-9s dice %.4f\n", to_string(c), s.mean);
}

ReviewService* g_service = nullptr;

void handle_signal(int) {
    if (g_service) g_service->stop();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-guided annotation: ensemble segmentation with an active-learning loop"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "uga 1.0");

    std::string config_path, out_dir, run_dir, strategy, selection, model_name, seeds_text, host = "127.0.0.1", ui_dir;
    int jobs = 1, k = 0, port = 8080;

    auto* generate = app.add_subcommand("generate-data", "Generate the synthetic cohort into a new run directory");
    generate->add_option("--config", config_path, "Configuration file (JSON); defaults when omitted");
    generate->add_option("--out", out_dir, "Run directory to create")->required();
    generate->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

    auto* train = app.add_subcommand("train-baseline", "Train the k-fold baseline ensemble on the train split");
    auto* rank = app.add_subcommand("rank", "Rank pool patches by ensemble disagreement under the current model");
    auto* sample = app.add_subcommand("sample", "Select patches per center and store oracle corrections");
    auto* retrain = app.add_subcommand("retrain", "Continue training from the baseline on a selection's corrections");
    auto* eval = app.add_subcommand("evaluate", "Evaluate a model on the test split");
    for (auto* sub : {train, rank, sample, retrain, eval})
        sub->add_option("--run-dir", run_dir, "Run directory")->required();
    for (auto* sub : {train, rank, retrain, eval}) sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    sample->add_option("--strategy", strategy, "uga or random")->required();
    sample->add_option("--k", k, "Patches per center")->required()->check(CLI::PositiveNumber);
    retrain->add_option("--selection", selection, "Selection name such as uga_k5 (default: last sampled)");
    eval->add_option("--model", model_name, "Model name under models/ (default: current)");

    auto* simulate = app.add_subcommand("simulate", "Run the full experiment with oracle corrections");
    simulate->add_option("--config", config_path, "Configuration file (JSON); defaults when omitted");
    simulate->add_option("--out", out_dir, "Output directory")->required();
    simulate->add_option("--seeds", seeds_text, "Comma-separated repetition seeds (overrides the config)");
    simulate->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

    auto* resume_cmd = app.add_subcommand("resume", "Continue an interrupted simulation");
    resume_cmd->add_option("--out", out_dir, "Output directory of the interrupted run")->required();
    resume_cmd->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

    auto* serve = app.add_subcommand("serve", "Serve the review API (and UI bundle) for a run directory");
    serve->add_option("--run-dir", run_dir, "Run directory")->required();
    serve->add_option("--port", port, "TCP port")->check(CLI::Range(0, 65535));
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--ui", ui_dir, "Directory with the built review UI");
    serve->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

    auto* print_config = app.add_subcommand("print-config", "Print the default configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (print_config->parsed()) {
            json j = to_json(ExperimentConfig{});
            j["experiment"]["jobs"] = 1;
            std::cout << j.dump(2) << '\n';
        } else if (generate->parsed()) {
            const auto config = config_or_default(config_path);
            const std::size_t n = stage_generate_data(config, RunDir{out_dir}, jobs);
            std::printf("wrote %zu slides to %s\n", n, (std::filesystem::path(out_dir) / "cohort").c_str());
        } else if (train->parsed()) {
            const auto model = stage_train_baseline(RunDir{run_dir}, jobs);
            std::printf("baseline %s (%zu folds)\n", model.id().c_str(), model.k());
        } else if (rank->parsed()) {
            const auto ranking = stage_rank(RunDir{run_dir}, jobs);
            std::size_t n = 0;
            for (const auto& [c, list] : ranking) n += list.size();
            std::printf("ranked %zu patches across %zu centers\n", n, ranking.size());
        } else if (sample->parsed()) {
            const auto sel = stage_sample(RunDir{run_dir}, parse_strategy(strategy), k);
            for (const auto& w : sel.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
            std::printf("selected %zu patches (%s)\n", sel.patches.size(), selection_name(parse_strategy(strategy), k).c_str());
        } else if (retrain->parsed()) {
            const auto model = stage_retrain(RunDir{run_dir}, selection, jobs);
            std::printf("model %s (round %d, parent %s)\n", model.id().c_str(), model.round, model.parent_id.c_str());
        } else if (eval->parsed()) {
            const RunDir dir{run_dir};
            const std::string name = model_name.empty() ? RunState::load(dir).current_model : model_name;
            print_report(name, stage_evaluate(dir, name, jobs));
        } else if (simulate->parsed()) {
            auto config = config_or_default(config_path);
            if (!seeds_text.empty()) config.seeds = parse_seeds(seeds_text);
            config.jobs = jobs;
            RunOptions options;
            options.on_round = print_round;
            const auto report = run_experiment(config, out_dir, options);
            std::cout << '\n' << summary_table(summarize(report, config));
        } else if (resume_cmd->parsed()) {
            RunOptions options;
            options.on_round = print_round;
            const auto report = resume(out_dir, jobs, options);
            const auto config = experiment_config_from_json(read_json_file(std::filesystem::path(out_dir) / "config.json"));
            std::cout << '\n' << summary_table(summarize(report, config));
        } else if (serve->parsed()) {
            ServiceOptions options;
            options.jobs = jobs;
            options.ui_dir = ui_dir;
            ReviewService service(run_dir, options);
            if (!service.bind(host, port)) throw DataError("cannot bind " + host + ":" + std::to_string(port));
            g_service = &service;
            std::signal(SIGINT, handle_signal);
            std::signal(SIGTERM, handle_signal);
            std::printf("serving %s on http://%s:%d\n", run_dir.c_str(), host.c_str(), port);
            std::fflush(stdout);
            service.listen();
            g_service = nullptr;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
