// Acceptance suite: runs criteria 1-11 at their stated tolerances and prints
// one PASS/FAIL line per criterion. Exit status is 0 only if all pass.
//
//   uga_acceptance [--work-dir DIR] [--jobs N] [--only 1,2,...]

#include <CLI11.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "uga/loop.hpp"
#include "uga/stages.hpp"

namespace {

using namespace uga;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Image random_input(int h, int w, Rng& rng) {
    Image img(h, w, 3);
    for (auto& v : img.data) v = static_cast<float>(rng.normal());
    return img;
}

// ---- uncertainty math ----

Outcome agreement_zero() {
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 12; ++trial) {
        const int k = std::array{2, 3, 5}[static_cast<std::size_t>(trial % 3)];
        const Image lp = predict_log_probs(init_params(rng.next()), random_input(16, 16, rng), true);
        const std::vector<Image> maps(static_cast<std::size_t>(k), lp);
        for (double v : pixel_disagreement(std::span<const Image>(maps)).scores) worst = std::max(worst, v);
    }
    return {worst <= 1e-9, fmt("max U over 12 identical-fold stacks = %.3e (<= 1e-9)", worst)};
}

double kl_oracle(const std::vector<std::array<double, 2>>& p) {
    const double k = static_cast<double>(p.size());
    double m0 = 0, m1 = 0;
    for (const auto& pi : p) {
        m0 += std::log(pi[0]) / k;
        m1 += std::log(pi[1]) / k;
    }
    const double z = std::exp(m0) + std::exp(m1);
    const double q0 = std::exp(m0) / z, q1 = std::exp(m1) / z;
    double total = 0;
    for (const auto& pi : p) total += q0 * std::log(q0 / pi[0]) + q1 * std::log(q1 / pi[1]);
    return total / k;
}

double pixel_score(const std::vector<std::array<double, 2>>& p) {
    std::vector<Image> maps;
    for (const auto& pi : p) {
        Image m(1, 1, 2);
        m.data[0] = static_cast<float>(std::log(pi[0]));
        m.data[1] = static_cast<float>(std::log(pi[1]));
        maps.push_back(std::move(m));
    }
    return pixel_disagreement(std::span<const Image>(maps)).scores[0];
}

Outcome oracle_equivalence() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<std::array<double, 2>> p(static_cast<std::size_t>(std::array{2, 3, 5}[static_cast<std::size_t>(t % 3)]));
        for (auto& pi : p) {
            // the maps hold float log-probabilities; give the oracle the same values
            const double a = rng.uniform(0.01, 0.99);
            pi = {std::exp(static_cast<double>(static_cast<float>(std::log(a)))),
                  std::exp(static_cast<double>(static_cast<float>(std::log(1.0 - a))))};
        }
        worst = std::max(worst, std::abs(pixel_score(p) - kl_oracle(p)));
    }
    const double opposite = pixel_score({{0.9, 0.1}, {0.1, 0.9}});
    const double elapsed = seconds_since(t0);
    const bool pass = worst <= 1e-6 && std::abs(opposite - 0.5108) < 5e-5 && elapsed < 1.0;
    return {pass, fmt("max |U - KL oracle| = %.2e (<= 1e-6); (0.9,0.1)/(0.1,0.9) -> %.6f nats (~0.5108); %.3f s (< 1 s)",
                      worst, opposite, elapsed)};
}

Outcome monotonicity() {
    std::string values;
    double prev = -1.0;
    bool pass = true;
    for (double a : {0.5, 0.6, 0.7, 0.8, 0.9}) {
        const double u = pixel_score({{a, 1 - a}, {1 - a, a}});
        pass = pass && u > prev;
        prev = u;
        values += fmt("%s%.4f", values.empty() ? "" : " < ", u);
    }
    return {pass, "U(a) for a = 0.5..0.9: " + values};
}

// ---- segmenter numerics ----

Outcome gradient_check() {
    const auto t0 = Clock::now();
    Rng rng(404);
    auto params = init_params(rng.next()).cast<double>();
    for (std::size_t l = 0; l < kNumLayers; ++l)
        for (auto& b : params.biases(l)) b = 0.05;
    std::vector<TrainingSample> batch;
    for (int i = 0; i < 2; ++i) {
        Mask m(4, 4);
        for (auto& v : m.data) v = rng.bernoulli(0.4) ? 1 : 0;
        batch.push_back({random_input(4, 4, rng), m});
    }
    const std::span<const TrainingSample> span(batch);
    const auto analytic = gradient(params, span);
    auto loss_at = [&](std::size_t i, double delta) {
        auto q = params;
        q.values[i] += delta;
        return batch_loss(q, span);
    };
    constexpr double h = 1e-4;
    double worst = 0.0;
    int min_checked = 1 << 30, skipped = 0;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        const std::size_t begin = layer_offset(l), end = layer_offset(l + 1);
        int checked = 0;
        for (int tries = 0; checked < 20 && tries < 400; ++tries) {
            const std::size_t i = begin + rng.below(static_cast<std::uint64_t>(end - begin));
            const double fd = (loss_at(i, h) - loss_at(i, -h)) / (2 * h);
            // a step that crosses a ReLU kink makes the two step sizes disagree
            const double fd_half = (loss_at(i, h / 2) - loss_at(i, -h / 2)) / h;
            if (std::abs(fd - fd_half) > 1e-6 * std::max(1.0, std::abs(fd))) {
                ++skipped;
                continue;
            }
            const double g = analytic.grad.values[i];
            worst = std::max(worst, std::abs(fd - g) / std::max(std::abs(fd) + std::abs(g), 1e-7));
            ++checked;
        }
        min_checked = std::min(min_checked, checked);
    }
    const double elapsed = seconds_since(t0);
    return {worst <= 1e-3 && min_checked >= 20 && elapsed < 10.0,
            fmt("max rel err %.2e (<= 1e-3) over >= %d coords/layer, %d kink coords skipped, %.2f s (< 10 s)", worst,
                min_checked, skipped, elapsed)};
}

Outcome log_softmax_normalized() {
    Rng rng(505);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        ModelParams p = init_params(rng.next());
        for (auto& v : p.values) v *= static_cast<float>(rng.uniform(0.5, 4.0)); // include sharp models
        const Image out = predict_log_probs(p, random_input(12 + t % 5, 9 + t % 7, rng), t % 2 == 0);
        for (std::size_t i = 0; i < out.plane_size(); ++i) {
            const double s = std::exp(static_cast<double>(out.data[i])) + std::exp(static_cast<double>(out.data[out.plane_size() + i]));
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    return {worst <= 1e-6, fmt("max |sum exp - 1| over 20 random models/inputs = %.2e (<= 1e-6)", worst)};
}

// ---- pipeline determinism and hygiene ----

int run_command(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Metrics, rankings and reports of a run, keyed by relative path.
std::map<std::string, std::string> result_files(const fs::path& out) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), out).string();
        if (rel.find("metrics/") != std::string::npos || rel.find("rankings/") != std::string::npos ||
            rel == "report.json" || rel == "summary.csv")
            files[rel] = file_bytes(e.path());
    }
    return files;
}

Outcome simulate_twice(const fs::path& work, int jobs) {
    // the complete pipeline on the default cohort, with shortened training
    ExperimentConfig config;
    config.train.steps = 120;
    config.retrain.steps = 40;
    config.k_schedule = {5};
    write_json_file(work / "determinism.json", to_json(config));
    const fs::path a = work / "simulate_a", b = work / "simulate_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const std::string base = std::string(UGA_CLI_PATH) + " simulate --config " + (work / "determinism.json").string();
    const int ca = run_command(base + " --jobs 1 --out " + a.string() + " > " + (work / "simulate_a.log").string() + " 2>&1");
    const int cb = run_command(base + " --jobs " + std::to_string(jobs) + " --out " + b.string() + " > " +
                               (work / "simulate_b.log").string() + " 2>&1");
    if (ca != 0 || cb != 0) return {false, fmt("simulate exited with %d / %d", ca, cb)};
    const auto fa = result_files(a), fb = result_files(b);
    std::size_t same = 0;
    std::string first_diff;
    for (const auto& [rel, bytes] : fa) {
        const auto it = fb.find(rel);
        if (it != fb.end() && it->second == bytes) ++same;
        else if (first_diff.empty()) first_diff = rel;
    }
    const bool pass = fa.size() == fb.size() && same == fa.size() && fa.size() >= 10;
    return {pass, fmt("%zu/%zu metric, ranking and report files byte-identical across two runs%s%s", same, fa.size(),
                      first_diff.empty() ? "" : "; first difference: ", first_diff.c_str())};
}

/// Ranked and selected patches of a finished trend run come from the pool
/// and respect the background cap; the baseline and ranking are unchanged
/// when every test slide is altered.
Outcome hygiene(const fs::path& trend_dir, const fs::path& work) {
    std::size_t ranked = 0, selected = 0, violations = 0;
    double max_bg = 0.0;
    for (const auto& seed_entry : fs::directory_iterator(trend_dir)) {
        if (!seed_entry.is_directory()) continue;
        const fs::path sd = seed_entry.path();
        const auto cohort = load_cohort(sd / "cohort");
        std::map<std::string, Split> split;
        for (const auto& s : cohort) split[s.id] = s.split;
        for (const auto& f : fs::directory_iterator(sd / "rankings")) {
            const bool is_ranking = f.path().filename() == "baseline.json";
            for (const auto& e : read_json_file(f.path())) {
                const auto p = ranked_patch_from_json(e);
                (is_ranking ? ranked : selected)++;
                max_bg = std::max(max_bg, p.score.background_fraction);
                if (split.at(p.score.slide_id) != Split::pool) ++violations;
                if (is_ranking && p.score.background_fraction > 0.7) ++violations;
            }
        }
        for (const auto& d : fs::directory_iterator(sd / "corrections"))
            for (const auto& cp : read_corrections(d.path()))
                if (split.at(cp.slide_id) != Split::pool) ++violations;
    }

    // perturbation: invert every test slide and retrain/rerank stage by stage
    ExperimentConfig config;
    config.train.steps = 60;
    const RunDir clean{work / "hygiene_clean"}, altered{work / "hygiene_altered"};
    fs::remove_all(clean.root);
    fs::remove_all(altered.root);
    stage_generate_data(config, clean);
    stage_generate_data(config, altered);
    auto slides = load_cohort(altered.cohort());
    std::size_t inverted = 0;
    for (auto& s : slides)
        if (s.split == Split::test) {
            for (auto& v : s.image.data) v = 1.0f - v;
            for (auto& v : s.mask.data) v = v ? 0 : 1;
            ++inverted;
        }
    const CohortSpec spec = detail::seeded_cohort(config, stage_seed(config));
    write_cohort(altered.cohort(), slides, &spec);
    const auto m_clean = stage_train_baseline(clean), m_altered = stage_train_baseline(altered);
    stage_rank(clean);
    stage_rank(altered);
    const bool same_model = m_clean.id() == m_altered.id();
    const bool same_ranking = file_bytes(clean.ranking()) == file_bytes(altered.ranking());

    const bool pass = violations == 0 && ranked > 0 && selected > 0 && same_model && same_ranking;
    return {pass, fmt("%zu ranked + %zu selected patches, max background %.3f (<= 0.7), %zu split violations; "
                      "%zu test slides inverted -> baseline %s, ranking %s",
                      ranked, selected, max_bg, violations, inverted, same_model ? "identical" : "CHANGED",
                      same_ranking ? "identical" : "CHANGED")};
}

Outcome dice_oracle() {
    Rng rng(808);
    double worst = 0.0;
    for (int t = 0; t < 500; ++t) {
        const double p = rng.uniform(0.0, 0.6);
        Mask a(16, 16), b(16, 16);
        for (auto& v : a.data) v = rng.bernoulli(p) ? 1 : 0;
        for (auto& v : b.data) v = rng.bernoulli(p) ? 1 : 0;
        std::set<int> sa, sb, both;
        for (int i = 0; i < 256; ++i) {
            if (a.data[static_cast<std::size_t>(i)]) sa.insert(i);
            if (b.data[static_cast<std::size_t>(i)]) sb.insert(i);
        }
        std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.begin()));
        const double oracle = sa.empty() && sb.empty() ? 1.0 : 2.0 * both.size() / static_cast<double>(sa.size() + sb.size());
        worst = std::max(worst, std::abs(dice(a, b) - oracle));
    }
    const double empty = dice(Mask(16, 16), Mask(16, 16));
    return {worst <= 1e-9 && empty == 1.0, fmt("max |dice - set oracle| = %.1e (<= 1e-9) on 500 pairs; empty-empty = %.1f",
                                               worst, empty)};
}

// ---- trend reproduction ----

struct TrendRun {
    ExperimentReport report;
    ExperimentConfig config;
    double seconds = 0.0;
    fs::path dir;
};

double overall(const TrendRun& t, std::uint64_t seed, const char* strategy, int k) {
    const auto* r = t.report.find(seed, strategy, k);
    return r && r->status == "done" ? r->report.overall.mean : std::nan("");
}

Outcome trend_ordering(const TrendRun& t) {
    int ordered = 0, beat5 = 0, beat10 = 0;
    std::string rows;
    for (auto seed : t.config.seeds) {
        const double b = overall(t, seed, "baseline", 0), u5 = overall(t, seed, "uga", 5), u10 = overall(t, seed, "uga", 10);
        const double r5 = overall(t, seed, "random", 5), r10 = overall(t, seed, "random", 10);
        ordered += b < u5 && u5 <= u10;
        beat5 += u5 >= r5;
        beat10 += u10 >= r10;
        rows += fmt("\n        seed %llu: baseline %.3f  uga@5 %.3f  uga@10 %.3f  random@5 %.3f  random@10 %.3f",
                    static_cast<unsigned long long>(seed), b, u5, u10, r5, r10);
    }
    const int n = static_cast<int>(t.config.seeds.size());
    const bool pass = n >= 5 && ordered >= 4 && beat5 >= 4 && beat10 >= 4 && t.seconds <= 600.0;
    return {pass, fmt("baseline < uga@5 <= uga@10 in %d/%d seeds (>= 4); uga >= random at k=5 in %d/%d, k=10 in %d/%d "
                      "(>= 4 each); %.0f s (<= 600 s)",
                      ordered, n, beat5, n, beat10, n, t.seconds) +
                      rows};
}

Outcome train_center_lowest(const TrendRun& t) {
    int lowest = 0;
    std::string rows;
    const int train_center = t.config.cohort.train_center;
    for (auto seed : t.config.seeds) {
        const auto* r = t.report.find(seed, "baseline", 0);
        if (!r || r->status != "done" || r->report.uncertainty_by_center.size() != 5) continue;
        const auto& u = r->report.uncertainty_by_center;
        const auto best = std::min_element(u.begin(), u.end(), [](auto& a, auto& b) { return a.second < b.second; });
        lowest += best->first == train_center;
        rows += fmt("\n        seed %llu:", static_cast<unsigned long long>(seed));
        for (const auto& [c, v] : u) rows += fmt(" c%d %.4f", c, v);
    }
    const int n = static_cast<int>(t.config.seeds.size());
    return {lowest >= 4, fmt("training center has the lowest mean patch uncertainty in %d/%d seeds (>= 4)", lowest, n) + rows};
}

Outcome itc_improves(const TrendRun& t) {
    int reported = 0, rounds = 0, improved = 0;
    std::string rows;
    for (const auto& r : t.report.rounds) {
        if (r.status != "done") continue;
        ++rounds;
        bool all = true;
        for (auto c : kLesionClasses) all = all && r.report.per_class.contains(c);
        reported += all;
    }
    for (auto seed : t.config.seeds) {
        const auto* b = t.report.find(seed, "baseline", 0);
        const auto* u = t.report.find(seed, "uga", 10);
        if (!b || !u || b->status != "done" || u->status != "done") continue;
        const double bi = b->report.per_class.at(LesionClass::itc).mean, ui = u->report.per_class.at(LesionClass::itc).mean;
        improved += ui > bi;
        rows += fmt("\n        seed %llu: itc baseline %.3f -> uga@10 %.3f", static_cast<unsigned long long>(seed), bi, ui);
    }
    const int n = static_cast<int>(t.config.seeds.size());
    return {reported == rounds && rounds > 0 && improved >= 3,
            fmt("all four classes reported in %d/%d rounds; uga@10 improves itc in %d/%d seeds (>= 3)", reported, rounds,
                improved, n) +
                rows};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-11"};
    std::string work_dir = (fs::temp_directory_path() / "uga_acceptance").string();
    int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    std::string only_text;
    app.add_option("--work-dir", work_dir, "Scratch directory (cleared first)");
    app.add_option("--jobs", jobs, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
    app.add_option("--only", only_text, "Comma-separated criterion numbers to run");
    CLI11_PARSE(app, argc, argv);

    std::set<int> only;
    {
        std::stringstream in(only_text);
        std::string item;
        while (std::getline(in, item, ','))
            if (!item.empty()) only.insert(std::stoi(item));
    }
    auto wanted = [&](int n) { return only.empty() || only.contains(n); };

    const fs::path work(work_dir);
    fs::remove_all(work);
    fs::create_directories(work);

    int failures = 0;
    auto report = [&](int n, const char* name, const Outcome& o) {
        std::printf("[%s] %2d %-26s %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    };
    auto guarded = [&](int n, const char* name, auto&& fn) {
        if (!wanted(n)) return;
        try {
            report(n, name, fn());
        } catch (const std::exception& e) {
            report(n, name, Outcome{false, std::string("exception: ") + e.what()});
        }
    };

    guarded(1, "agreement-zero", agreement_zero);
    guarded(2, "kl-oracle-equivalence", oracle_equivalence);
    guarded(3, "monotone-disagreement", monotonicity);
    guarded(4, "gradient-check", gradient_check);
    guarded(5, "log-softmax-normalized", log_softmax_normalized);
    guarded(6, "simulate-determinism", [&] { return simulate_twice(work, jobs); });
    guarded(8, "dice-oracle", dice_oracle);

    // criteria 7 and 9-11 share one five-seed run on the default cohort
    std::optional<TrendRun> trend;
    if (wanted(7) || wanted(9) || wanted(10) || wanted(11)) {
        try {
            TrendRun t;
            t.config.seeds = {1, 2, 3, 4, 5};
            t.config.k_schedule = {5, 10};
            t.config.jobs = jobs;
            t.dir = work / "trend";
            std::printf("running the five-seed trend experiment on the default cohort (%d thread%s)...\n", jobs,
                        jobs == 1 ? "" : "s");
            std::fflush(stdout);
            const auto t0 = Clock::now();
            t.report = run_experiment(t.config, t.dir);
            t.seconds = seconds_since(t0);
            std::cout << summary_table(summarize(t.report, t.config));
            trend = std::move(t);
        } catch (const std::exception& e) {
            for (int n : {7, 9, 10, 11})
                if (wanted(n)) report(n, "trend-run", Outcome{false, std::string("exception: ") + e.what()});
        }
    }
    if (trend) {
        guarded(7, "split-and-background", [&] { return hygiene(trend->dir, work); });
        guarded(9, "dice-trend", [&] { return trend_ordering(*trend); });
        guarded(10, "train-center-certainty", [&] { return train_center_lowest(*trend); });
        guarded(11, "itc-stratum", [&] { return itc_improves(*trend); });
    }

    std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "OK", failures);
    return failures ? 1 : 0;
}
