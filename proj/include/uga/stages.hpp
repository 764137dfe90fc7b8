#pragma once

// Stage-by-stage operations on a single run directory, used by the CLI
// subcommands and the review service:
//
//   config.json            full configuration
//   cohort/                images/, masks/, manifest.json
//   models/<name>/         model.ugam + model.json (baseline, uga_k5, ...)
//   rankings/ranking.json  pool ranking under the current model
//   rankings/<name>.json   a selection
//   corrections/<name>/    corrected patches of a selection
//   metrics/<name>.*       evaluation report (json, per-slide csv, plot csv)
//   state.json             current model, last selection, evaluation history
//
// Stages use the first configured seed, so a stage-by-stage run reproduces
// seed_<s>/ of a full simulation.

#include <filesystem>
#include <string>
#include <vector>

#include "uga/error.hpp"
#include "uga/evaluation.hpp"
#include "uga/json_util.hpp"
#include "uga/loop.hpp"
#include "uga/sampler.hpp"
#include "uga/synthdata.hpp"
#include "uga/training.hpp"

namespace uga {

struct RunDir {
    std::filesystem::path root;

    std::filesystem::path config() const { return root / "config.json"; }
    std::filesystem::path cohort() const { return root / "cohort"; }
    std::filesystem::path model(const std::string& name) const { return root / "models" / name; }
    std::filesystem::path ranking() const { return root / "rankings" / "ranking.json"; }
    std::filesystem::path selection(const std::string& name) const { return root / "rankings" / (name + ".json"); }
    std::filesystem::path corrections(const std::string& name) const { return root / "corrections" / name; }
    std::filesystem::path metrics() const { return root / "metrics"; }
    std::filesystem::path state() const { return root / "state.json"; }
};

/// Mutable bookkeeping of a stage-by-stage run.
struct RunState {
    std::string current_model = "baseline";
    std::string last_selection;
    json history = json::array(); ///< [{round, model, model_id, metrics}]

    static RunState load(const RunDir& dir) {
        RunState s;
        if (!std::filesystem::exists(dir.state())) return s;
        const json j = read_json_file(dir.state());
        s.current_model = j.value("current_model", s.current_model);
        s.last_selection = j.value("last_selection", std::string{});
        if (j.contains("history")) s.history = j.at("history");
        return s;
    }

    void save(const RunDir& dir) const {
        write_json_file(dir.state(),
                        json{{"current_model", current_model}, {"last_selection", last_selection}, {"history", history}});
    }

    /// Replaces the entry for `model` or appends a new round.
    void record_evaluation(const std::string& model, const std::string& model_id) {
        for (auto& e : history)
            if (e.at("model") == model) {
                e["model_id"] = model_id;
                return;
            }
        history.push_back({{"round", history.size()}, {"model", model}, {"model_id", model_id},
                           {"metrics", "metrics/" + model + ".json"}});
    }
};

inline ExperimentConfig load_run_config(const RunDir& dir) {
    return experiment_config_from_json(read_json_file(dir.config()));
}

inline std::uint64_t stage_seed(const ExperimentConfig& c) { return c.seeds.front(); }

inline std::vector<Slide> load_run_cohort(const RunDir& dir) {
    if (!std::filesystem::exists(dir.cohort() / "manifest.json"))
        throw MissingArtifact((dir.cohort() / "manifest.json").string());
    return load_cohort(dir.cohort());
}

/// Writes config.json and the cohort. Returns the number of slides.
inline std::size_t stage_generate_data(const ExperimentConfig& config, const RunDir& dir, int jobs = 1) {
    config.validate();
    const CohortSpec spec = detail::seeded_cohort(config, stage_seed(config));
    const auto slides = generate_cohort(spec, jobs);
    std::filesystem::create_directories(dir.root);
    write_json_file(dir.config(), to_json(config));
    write_cohort(dir.cohort(), slides, &spec);
    return slides.size();
}

inline EnsembleModel stage_train_baseline(const RunDir& dir, int jobs = 1) {
    const auto config = load_run_config(dir);
    const auto cohort = load_run_cohort(dir);
    auto result = train_kfold(detail::slides_of(cohort, Split::train),
                              detail::seeded_train(config, stage_seed(config)), jobs);
    save_model(dir.model("baseline"), result.model);
    RunState state = RunState::load(dir);
    state.current_model = "baseline";
    state.save(dir);
    return std::move(result.model);
}

inline Ranking stage_rank(const RunDir& dir, int jobs = 1) {
    const auto config = load_run_config(dir);
    const RunState state = RunState::load(dir);
    const EnsembleModel model = load_model(dir.model(state.current_model));
    const auto cohort = load_run_cohort(dir);
    const auto pool = detail::slides_of(cohort, Split::pool);
    Ranking ranking = rank_pool(pool, model, config.train.patch_size, config.sampler, config.uncertainty, jobs);
    write_json_file(dir.ranking(), ranking_json(ranking));
    return ranking;
}

inline std::string selection_name(Strategy s, int k) { return std::string(to_string(s)) + "_k" + std::to_string(k); }

/// Selects k patches per center, applies oracle corrections and stores both.
inline Selection stage_sample(const RunDir& dir, Strategy strategy, int k) {
    if (strategy == Strategy::both) throw ConfigError("sample: strategy must be uga or random");
    if (k < 1) throw ConfigError("sample: k must be >= 1");
    const auto config = load_run_config(dir);
    const auto cohort = load_run_cohort(dir);
    const int patch = config.train.patch_size;
    Selection sel;
    if (strategy == Strategy::uga) {
        sel = select_uga(ranking_from_json(read_json_file(dir.ranking())), k, patch);
    } else {
        sel = select_random(detail::slides_of(cohort, Split::pool), k, patch, config.sampler, stage_seed(config),
                            config.uncertainty);
    }
    const std::string name = selection_name(strategy, k);
    std::vector<CorrectedPatch> corrections;
    for (const auto& p : sel.patches) corrections.push_back(simulate_correction(p, patch, cohort));
    write_json_file(dir.selection(name), selection_json(sel.patches));
    write_corrections(dir.corrections(name), corrections, &sel.patches);
    RunState state = RunState::load(dir);
    state.last_selection = name;
    state.save(dir);
    return sel;
}

inline int selection_k(const std::string& name) {
    const auto pos = name.rfind("_k");
    if (pos == std::string::npos) return 0;
    try {
        return std::stoi(name.substr(pos + 2));
    } catch (const std::exception&) {
        return 0;
    }
}

/// Continues training from the baseline on the corrections of `selection`
/// (the last sampled one by default) and makes the result current.
inline EnsembleModel stage_retrain(const RunDir& dir, std::string selection = {}, int jobs = 1) {
    const auto config = load_run_config(dir);
    RunState state = RunState::load(dir);
    if (selection.empty()) selection = state.last_selection;
    if (selection.empty()) throw MissingArtifact((dir.root / "corrections" / "<selection>" / "index.json").string());
    const auto index = dir.corrections(selection) / "index.json";
    if (!std::filesystem::exists(index)) throw MissingArtifact(index.string());
    const EnsembleModel baseline = load_model(dir.model("baseline"));
    const auto cohort = load_run_cohort(dir);
    const std::uint64_t seed = stage_seed(config);
    auto corrections = read_corrections(dir.corrections(selection));
    if (corrections.empty()) throw DataError("selection " + selection + " has no corrections");
    const PatchSource source = augmented_source(
        std::move(corrections), config.sampler.augment_copies, config.sampler.hue_range,
        [seed](std::size_t i) { return derive_seed(seed, {0xa09, static_cast<std::uint64_t>(i)}); });
    auto result = continue_training(baseline, detail::slides_of(cohort, Split::train), source,
                                    detail::retrain_config(config, seed, selection_k(selection), 0),
                                    config.retrain.new_mix, jobs);
    save_model(dir.model(selection), result.model);
    state.current_model = selection;
    state.save(dir);
    return std::move(result.model);
}

inline StratifiedReport stage_evaluate(const RunDir& dir, std::string model_name = {}, int jobs = 1) {
    const auto config = load_run_config(dir);
    RunState state = RunState::load(dir);
    if (model_name.empty()) model_name = state.current_model;
    const EnsembleModel model = load_model(dir.model(model_name));
    const auto cohort = load_run_cohort(dir);
    StratifiedReport report = evaluate(model, detail::slides_of(cohort, Split::test), config.train.patch_size,
                                       config.evaluation, config.uncertainty, jobs);
    write_report(dir.metrics(), model_name, report);
    state.record_evaluation(model_name, model.id());
    state.save(dir);
    return report;
}

} // namespace uga
