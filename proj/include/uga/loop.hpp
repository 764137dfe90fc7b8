#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uga/error.hpp"
#include "uga/evaluation.hpp"
#include "uga/json_util.hpp"
#include "uga/sampler.hpp"
#include "uga/synthdata.hpp"
#include "uga/training.hpp"
#include "uga/uncertainty.hpp"

namespace uga {

enum class Strategy { uga, random, both };

inline const char* to_string(Strategy s) {
    switch (s) {
    case Strategy::uga: return "uga";
    case Strategy::random: return "random";
    case Strategy::both: return "both";
    }
    return "?";
}

struct RetrainConfig {
    int steps = 250;
    double new_mix = 0.5;    ///< probability that a batch entry is a corrected patch
    bool cumulative = false; ///< chain k-rounds instead of restarting each from the baseline

    void validate() const {
        if (steps < 0) throw ConfigError("retrain.steps: must be >= 0");
        if (!(new_mix >= 0.0 && new_mix <= 1.0)) throw ConfigError("retrain.new_mix: must be in [0, 1]");
    }
};

/// The complete configuration file: one section per module.
struct ExperimentConfig {
    CohortSpec cohort;
    TrainConfig train;
    RetrainConfig retrain;
    SamplerConfig sampler;
    UncertaintyConfig uncertainty;
    EvaluationConfig evaluation;
    Strategy strategy = Strategy::both;
    std::vector<int> k_schedule{5, 10, 20};
    std::vector<std::uint64_t> seeds{1};
    int jobs = 1; ///< worker threads; results do not depend on it

    void validate() const {
        cohort.validate(train.patch_size);
        train.validate();
        retrain.validate();
        sampler.validate();
        uncertainty.validate();
        if (k_schedule.empty()) throw ConfigError("experiment.k_schedule: must not be empty");
        for (std::size_t i = 0; i < k_schedule.size(); ++i) {
            if (k_schedule[i] < 1) throw ConfigError("experiment.k_schedule: entries must be >= 1");
            if (i > 0 && k_schedule[i] <= k_schedule[i - 1])
                throw ConfigError("experiment.k_schedule: must be strictly increasing");
        }
        if (seeds.empty()) throw ConfigError("experiment.seeds: must not be empty");
        if (jobs < 1) throw ConfigError("experiment.jobs: must be >= 1");
    }

    std::vector<Strategy> arms() const {
        if (strategy == Strategy::both) return {Strategy::uga, Strategy::random};
        return {strategy};
    }
};

/// Deterministic part of the configuration (jobs excluded).
inline json to_json(const ExperimentConfig& c) {
    return json{{"cohort", to_json(c.cohort)},
                {"train", to_json(c.train)},
                {"retrain", {{"steps", c.retrain.steps}, {"new_mix", c.retrain.new_mix}, {"cumulative", c.retrain.cumulative}}},
                {"sampler", to_json(c.sampler)},
                {"uncertainty", to_json(c.uncertainty)},
                {"evaluation", to_json(c.evaluation)},
                {"experiment", {{"strategy", to_string(c.strategy)}, {"k_schedule", c.k_schedule}, {"seeds", c.seeds}}}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    SectionReader root(j, "");
    if (const json* s = root.child("cohort")) c.cohort = cohort_spec_from_json(*s);
    if (const json* s = root.child("train")) c.train = train_config_from_json(*s);
    if (const json* s = root.child("retrain")) {
        SectionReader r(*s, "retrain");
        r.get("steps", c.retrain.steps).get("new_mix", c.retrain.new_mix).get("cumulative", c.retrain.cumulative).finish();
    }
    if (const json* s = root.child("sampler")) c.sampler = sampler_config_from_json(*s);
    if (const json* s = root.child("uncertainty")) c.uncertainty = uncertainty_config_from_json(*s);
    if (const json* s = root.child("evaluation")) c.evaluation = evaluation_config_from_json(*s);
    if (const json* s = root.child("experiment")) {
        SectionReader r(*s, "experiment");
        std::string strategy = to_string(c.strategy);
        r.get("strategy", strategy).get("k_schedule", c.k_schedule).get("seeds", c.seeds).get("jobs", c.jobs).finish();
        if (strategy == "uga")
            c.strategy = Strategy::uga;
        else if (strategy == "random")
            c.strategy = Strategy::random;
        else if (strategy == "both")
            c.strategy = Strategy::both;
        else
            throw ConfigError("experiment.strategy: expected uga, random or both");
    }
    root.finish();
    c.validate();
    return c;
}

struct PatchRef {
    std::string slide_id;
    Point origin;
};

struct RoundRecord {
    std::uint64_t seed = 0;
    int round_index = 0;
    std::string strategy; ///< "baseline", "uga" or "random"
    int k = 0;
    std::vector<PatchRef> selected;
    std::string model_id;
    StratifiedReport report;
    std::string status = "done"; ///< "done" or "error"
    std::string error;
    double duration_seconds = 0.0; ///< wall clock; kept out of the deterministic report file

    std::string name() const { return strategy == "baseline" ? "baseline" : strategy + "_k" + std::to_string(k); }
};

struct ExperimentReport {
    std::vector<RoundRecord> rounds;

    const RoundRecord* find(std::uint64_t seed, const std::string& strategy, int k) const {
        for (const auto& r : rounds)
            if (r.seed == seed && r.strategy == strategy && r.k == k) return &r;
        return nullptr;
    }
};

inline json to_json(const RoundRecord& r) {
    json sel = json::array();
    for (const auto& p : r.selected) sel.push_back({{"slide_id", p.slide_id}, {"x", p.origin.x}, {"y", p.origin.y}});
    json j{{"seed", r.seed},           {"round_index", r.round_index}, {"strategy", r.strategy},
           {"k", r.k},                 {"selected", sel},              {"model_id", r.model_id},
           {"status", r.status}};
    if (r.status == "done") j["report"] = to_json(r.report);
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

inline json to_json(const ExperimentReport& report) {
    json rounds = json::array();
    for (const auto& r : report.rounds) rounds.push_back(to_json(r));
    return json{{"rounds", rounds}};
}

struct SummaryRow {
    std::string label; ///< "baseline", "uga@5", ...
    Stat dice;         ///< over seeds of the per-seed overall mean Dice
};

/// Baseline first, then each strategy in k order.
inline std::vector<SummaryRow> summarize(const ExperimentReport& report, const ExperimentConfig& config) {
    std::vector<SummaryRow> rows;
    auto collect = [&](const std::string& strategy, int k, const std::string& label) {
        std::vector<double> v;
        for (auto seed : config.seeds)
            if (const auto* r = report.find(seed, strategy, k); r && r->status == "done") v.push_back(r->report.overall.mean);
        rows.push_back({label, summarize(v)});
    };
    collect("baseline", 0, "baseline");
    for (auto arm : config.arms())
        for (int k : config.k_schedule) collect(to_string(arm), k, std::string(to_string(arm)) + "@" + std::to_string(k));
    return rows;
}

inline std::string summary_table(const std::vector<SummaryRow>& rows) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof line, "%-12s %10s %10s %6s\n", "model", "dice_mean", "dice_std", "seeds");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-12s %10.4f %10.4f %6zu\n", r.label.c_str(), r.dice.mean, r.dice.std, r.dice.n);
        out << line;
    }
    return out.str();
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "model,dice_mean,dice_std,seeds\n";
    for (const auto& r : rows) out << r.label << ',' << r.dice.mean << ',' << r.dice.std << ',' << r.dice.n << '\n';
    return out.str();
}

inline constexpr int kRunFormatVersion = 1;

/// Test hooks and progress reporting; none of these affect results.
struct RunOptions {
    std::optional<int> stop_after_rounds; ///< simulate an interruption after this many completed rounds
    std::function<void(const RoundRecord&)> on_round;
};

namespace detail {

inline std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed) {
    return out / ("seed_" + std::to_string(seed));
}

inline std::vector<Slide> slides_of(const std::vector<Slide>& all, Split split) {
    std::vector<Slide> out;
    for (const auto& s : all)
        if (s.split == split) out.push_back(s);
    return out;
}

/// Per-seed derived configuration: cohort and training streams both depend
/// on the repetition seed.
inline CohortSpec seeded_cohort(const ExperimentConfig& c, std::uint64_t seed) {
    CohortSpec spec = c.cohort;
    spec.seed = derive_seed(c.cohort.seed, {0xc0407, seed});
    return spec;
}

inline TrainConfig seeded_train(const ExperimentConfig& c, std::uint64_t seed) {
    TrainConfig t = c.train;
    t.seed = derive_seed(c.train.seed, {0x7a1, seed});
    return t;
}

inline TrainConfig retrain_config(const ExperimentConfig& c, std::uint64_t seed, int k, int round_in_chain) {
    TrainConfig t = seeded_train(c, seed);
    t.steps = c.retrain.steps;
    // UGA and random arms share the stream for the same k, which pairs them
    t.seed = derive_seed(t.seed, {0x4e7, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(round_in_chain)});
    return t;
}

class Manifest {
public:
    explicit Manifest(std::filesystem::path path) : path_(std::move(path)) {
        if (std::filesystem::exists(path_)) {
            data_ = read_json_file(path_);
            if (data_.value("version", 0) != kRunFormatVersion)
                throw DataError("run manifest version mismatch: " + path_.string());
        } else {
            data_ = json{{"version", kRunFormatVersion}, {"rounds", json::object()}};
        }
    }

    bool done(const std::string& key) const {
        const auto& rounds = data_.at("rounds");
        return rounds.contains(key) && rounds.at(key).value("status", "") == "done";
    }

    void set(const std::string& key, const std::string& status, const std::string& error = {}) {
        json entry{{"status", status}};
        if (!error.empty()) entry["error"] = error;
        data_["rounds"][key] = entry;
        write_json_file(path_, data_);
    }

    void set_complete(bool complete) {
        data_["complete"] = complete;
        write_json_file(path_, data_);
    }

private:
    std::filesystem::path path_;
    json data_;
};

inline std::string round_key(std::uint64_t seed, const std::string& name) {
    return "seed_" + std::to_string(seed) + "/" + name;
}

inline std::vector<PatchRef> refs_of(const std::vector<RankedPatch>& patches) {
    std::vector<PatchRef> out;
    for (const auto& p : patches) out.push_back({p.score.slide_id, p.score.origin});
    return out;
}

struct Interrupted {};

inline void merge_timings(const std::filesystem::path& path, const json& fresh) {
    json all = std::filesystem::exists(path) ? read_json_file(path) : json::object();
    all.update(fresh);
    write_json_file(path, all);
}

} // namespace detail

/// Runs (or continues) the full experiment under config output directory
/// `out`. Completed rounds recorded in the manifest are reloaded from disk
/// instead of being recomputed.
inline ExperimentReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& out,
                                       const RunOptions& options = {}) {
    namespace fs = std::filesystem;
    config.validate();
    fs::create_directories(out);
    const json config_json = to_json(config);
    if (fs::exists(out / "config.json")) {
        if (read_json_file(out / "config.json") != config_json)
            throw ConfigError("run directory " + out.string() + " holds a different configuration");
    } else {
        write_json_file(out / "config.json", config_json);
    }
    detail::Manifest manifest(out / "manifest.json");
    manifest.set_complete(false);

    ExperimentReport report;
    json timings = json::object();
    int completed = 0;
    const int patch = config.train.patch_size;

    auto finish_round = [&](RoundRecord& rec, const std::chrono::steady_clock::time_point& start, bool fresh) {
        rec.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (fresh) timings[detail::round_key(rec.seed, rec.name())] = rec.duration_seconds;
        report.rounds.push_back(rec);
        if (options.on_round) options.on_round(rec);
        if (fresh && options.stop_after_rounds && ++completed >= *options.stop_after_rounds) throw detail::Interrupted{};
    };

    try {
        for (const std::uint64_t seed : config.seeds) {
            const fs::path dir = detail::seed_dir(out, seed);
            int round_index = 0;
            try {
                // cohort
                const CohortSpec spec = detail::seeded_cohort(config, seed);
                std::vector<Slide> cohort;
                if (fs::exists(dir / "cohort" / "manifest.json")) {
                    cohort = load_cohort(dir / "cohort");
                } else {
                    cohort = generate_cohort(spec, config.jobs);
                    write_cohort(dir / "cohort", cohort, &spec);
                }
                const auto train = detail::slides_of(cohort, Split::train);
                const auto pool = detail::slides_of(cohort, Split::pool);
                const auto test = detail::slides_of(cohort, Split::test);

                // baseline
                auto start = std::chrono::steady_clock::now();
                RoundRecord base;
                base.seed = seed;
                base.round_index = round_index++;
                base.strategy = "baseline";
                const std::string base_key = detail::round_key(seed, "baseline");
                EnsembleModel baseline;
                const bool base_fresh = !(manifest.done(base_key) && fs::exists(dir / "models/baseline/model.ugam") &&
                                          fs::exists(dir / "metrics/baseline.json"));
                if (!base_fresh) {
                    baseline = load_model(dir / "models/baseline");
                    base.report = report_from_json(read_json_file(dir / "metrics/baseline.json"));
                } else {
                    manifest.set(base_key, "running");
                    baseline = train_kfold(train, detail::seeded_train(config, seed), config.jobs).model;
                    save_model(dir / "models/baseline", baseline);
                    base.report = evaluate(baseline, test, patch, config.evaluation, config.uncertainty, config.jobs);
                    write_report(dir / "metrics", "baseline", base.report);
                    manifest.set(base_key, "done");
                }
                base.model_id = baseline.id();
                finish_round(base, start, base_fresh);

                // baseline ranking over the pool
                Ranking ranking;
                if (fs::exists(dir / "rankings/baseline.json")) {
                    ranking = ranking_from_json(read_json_file(dir / "rankings/baseline.json"));
                } else {
                    ranking = rank_pool(pool, baseline, patch, config.sampler, config.uncertainty, config.jobs);
                    write_json_file(dir / "rankings/baseline.json", ranking_json(ranking));
                }

                for (const Strategy arm : config.arms()) {
                    EnsembleModel parent = baseline;
                    std::vector<RankedPatch> selected_so_far;
                    int chain = 0;
                    for (const int k : config.k_schedule) {
                        start = std::chrono::steady_clock::now();
                        RoundRecord rec;
                        rec.seed = seed;
                        rec.round_index = round_index++;
                        rec.strategy = to_string(arm);
                        rec.k = k;
                        const std::string name = rec.name();
                        const std::string key = detail::round_key(seed, name);
                        const fs::path model_dir = dir / "models" / name;
                        const bool fresh = !(manifest.done(key) && fs::exists(model_dir / "model.ugam") &&
                                             fs::exists(dir / "metrics" / (name + ".json")) &&
                                             fs::exists(dir / "rankings" / (name + ".json")));
                        if (!fresh) {
                            const json sel = read_json_file(dir / "rankings" / (name + ".json"));
                            std::vector<RankedPatch> patches;
                            for (const auto& e : sel) patches.push_back(ranked_patch_from_json(e));
                            rec.selected = detail::refs_of(patches);
                            rec.report = report_from_json(read_json_file(dir / "metrics" / (name + ".json")));
                            EnsembleModel m = load_model(model_dir);
                            rec.model_id = m.id();
                            if (config.retrain.cumulative) {
                                parent = std::move(m);
                                selected_so_far = patches;
                            }
                            ++chain;
                            finish_round(rec, start, false);
                            continue;
                        }
                        manifest.set(key, "running");

                        // selection
                        std::vector<RankedPatch> chosen;
                        if (config.retrain.cumulative && chain > 0) {
                            // re-rank with the current model, skip patches already corrected
                            const Ranking current =
                                arm == Strategy::uga
                                    ? rank_pool(pool, parent, patch, config.sampler, config.uncertainty, config.jobs)
                                    : Ranking{};
                            Selection sel = arm == Strategy::uga
                                                ? select_uga(current, k + static_cast<int>(selected_so_far.size()), patch)
                                                : select_random(pool, k, patch, config.sampler, seed, config.uncertainty);
                            std::map<int, int> per_center;
                            for (const auto& p : selected_so_far) ++per_center[p.score.center];
                            chosen = selected_so_far;
                            for (auto& p : sel.patches) {
                                const bool already = std::any_of(selected_so_far.begin(), selected_so_far.end(), [&](const RankedPatch& q) {
                                    return q.score.slide_id == p.score.slide_id && patches_overlap(q.score.origin, p.score.origin, patch);
                                });
                                if (already || per_center[p.score.center] >= k) continue;
                                ++per_center[p.score.center];
                                chosen.push_back(p);
                            }
                        } else {
                            Selection sel = arm == Strategy::uga
                                                ? select_uga(ranking, k, patch)
                                                : select_random(pool, k, patch, config.sampler, seed, config.uncertainty);
                            chosen = std::move(sel.patches);
                        }

                        // oracle corrections and augmentation
                        std::vector<CorrectedPatch> corrections;
                        for (const auto& p : chosen) corrections.push_back(simulate_correction(p, patch, cohort));
                        write_corrections(dir / "corrections" / name, corrections, &chosen);
                        const PatchSource augmented = augmented_source(
                            corrections, config.sampler.augment_copies, config.sampler.hue_range,
                            [seed](std::size_t i) { return derive_seed(seed, {0xa09, static_cast<std::uint64_t>(i)}); });
                        const EnsembleModel& from = config.retrain.cumulative ? parent : baseline;
                        EnsembleModel model =
                            continue_training(from, train, augmented, detail::retrain_config(config, seed, k, chain),
                                              config.retrain.new_mix, config.jobs)
                                .model;
                        save_model(model_dir, model);
                        rec.report = evaluate(model, test, patch, config.evaluation, config.uncertainty, config.jobs);
                        write_report(dir / "metrics", name, rec.report);
                        write_json_file(dir / "rankings" / (name + ".json"), selection_json(chosen));
                        manifest.set(key, "done");
                        rec.selected = detail::refs_of(chosen);
                        rec.model_id = model.id();
                        if (config.retrain.cumulative) {
                            parent = std::move(model);
                            selected_so_far = chosen;
                        }
                        ++chain;
                        finish_round(rec, start, true);
                    }
                }
            } catch (const detail::Interrupted&) {
                throw;
            } catch (const std::exception& e) {
                // abort this seed; every missing cell carries the error
                auto record_error = [&](const std::string& strategy, int k) {
                    if (report.find(seed, strategy, k)) return;
                    RoundRecord rec;
                    rec.seed = seed;
                    rec.round_index = round_index++;
                    rec.strategy = strategy;
                    rec.k = k;
                    rec.status = "error";
                    rec.error = e.what();
                    manifest.set(detail::round_key(seed, rec.name()), "error", e.what());
                    report.rounds.push_back(rec);
                };
                record_error("baseline", 0);
                for (auto arm : config.arms())
                    for (int k : config.k_schedule) record_error(to_string(arm), k);
            }
        }
    } catch (const detail::Interrupted&) {
        detail::merge_timings(out / "timings.json", timings);
        return report;
    }

    write_json_file(out / "report.json", to_json(report));
    const auto rows = summarize(report, config);
    write_text_atomic(out / "summary.csv", summary_csv(rows));
    detail::merge_timings(out / "timings.json", timings);
    manifest.set_complete(true);
    return report;
}

/// Continues an interrupted run in `out` from its stored configuration.
inline ExperimentReport resume(const std::filesystem::path& out, int jobs = 1, const RunOptions& options = {}) {
    namespace fs = std::filesystem;
    if (!fs::exists(out / "manifest.json")) throw MissingArtifact((out / "manifest.json").string());
    ExperimentConfig config = experiment_config_from_json(read_json_file(out / "config.json"));
    config.jobs = jobs;
    return run_experiment(config, out, options);
}

} // namespace uga
