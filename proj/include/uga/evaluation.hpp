#pragma once

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uga/error.hpp"
#include "uga/json_util.hpp"
#include "uga/parallel.hpp"
#include "uga/sampler.hpp"
#include "uga/synthdata.hpp"
#include "uga/training.hpp"
#include "uga/uncertainty.hpp"

namespace uga {

/// 2|A and B| / (|A| + |B|); two empty masks score 1.
inline double dice(const Mask& pred, const Mask& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw DataError("dice: dimension mismatch " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                        " vs " + std::to_string(gt.width) + "x" + std::to_string(gt.height));
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

struct EvaluationConfig {
    int stride = 0;          ///< 0 = patch size
    double threshold = 0.5;  ///< probability >= threshold is foreground
    double bg_threshold = 0.7; ///< patches above this background fraction are left out of uncertainty stats
};

inline json to_json(const EvaluationConfig& c) {
    return json{{"stride", c.stride}, {"threshold", c.threshold}, {"bg_threshold", c.bg_threshold}};
}

inline EvaluationConfig evaluation_config_from_json(const json& j, const std::string& path = "evaluation") {
    EvaluationConfig c;
    SectionReader r(j, path);
    r.get("stride", c.stride).get("threshold", c.threshold).get("bg_threshold", c.bg_threshold).finish();
    if (c.stride < 0) throw ConfigError(r.key_path("stride") + ": must be >= 0");
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError(r.key_path("threshold") + ": must be in (0, 1)");
    return c;
}

/// Tile origins along one axis covering [0, extent); the last tile is pinned
/// to the far edge when the stride does not land there.
inline std::vector<int> covering_offsets(int extent, int patch, int stride) {
    std::vector<int> out;
    for (int o = 0; o + patch <= extent; o += stride) out.push_back(o);
    if (out.empty() || out.back() + patch < extent) out.push_back(extent - patch);
    return out;
}

struct SlideInference {
    Mask mask;
    /// Mean pixel disagreement of every non-background tile.
    std::vector<double> patch_uncertainty;
};

/// Tiled ensemble inference: fold probabilities are averaged (arithmetic
/// mean), overlapping tiles averaged per pixel, then thresholded.
inline SlideInference infer_slide(const EnsembleModel& ensemble, const Slide& slide, int patch_size,
                                  const EvaluationConfig& config = {}, const UncertaintyConfig& ucfg = {}) {
    const int h = slide.image.height, w = slide.image.width;
    if (patch_size > h || patch_size > w) throw DataError("patch larger than slide " + slide.id);
    if (ensemble.k() < 1) throw DataError("empty ensemble");
    const int stride = config.stride > 0 ? config.stride : patch_size;
    std::vector<double> prob_sum(static_cast<std::size_t>(h) * w, 0.0);
    std::vector<int> hits(prob_sum.size(), 0);
    SlideInference out;
    Workspace<float> ws;
    const std::size_t plane = static_cast<std::size_t>(patch_size) * patch_size;
    for (int oy : covering_offsets(h, patch_size, stride))
        for (int ox : covering_offsets(w, patch_size, stride)) {
            const Point origin{ox, oy};
            const Image patch = slide.image.crop(origin, patch_size, patch_size);
            const auto maps = ensemble_log_probs(ensemble, patch, ws);
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x) {
                    const std::size_t p = static_cast<std::size_t>(y) * patch_size + x;
                    double mean = 0.0;
                    for (const auto& m : maps) mean += std::exp(static_cast<double>(m.data[plane + p]));
                    mean /= static_cast<double>(maps.size());
                    const std::size_t q = static_cast<std::size_t>(oy + y) * w + (ox + x);
                    prob_sum[q] += mean;
                    ++hits[q];
                }
            if (ensemble.k() >= 2 &&
                background_fraction(patch, ucfg.white_threshold, ucfg.black_threshold) <= config.bg_threshold) {
                const auto umap = pixel_disagreement(maps, ucfg.variant);
                double total = 0.0;
                for (double v : umap.scores) total += v;
                out.patch_uncertainty.push_back(total / static_cast<double>(umap.scores.size()));
            }
        }
    out.mask = Mask(h, w);
    for (std::size_t q = 0; q < prob_sum.size(); ++q) out.mask.data[q] = prob_sum[q] / hits[q] >= config.threshold ? 1 : 0;
    return out;
}

inline Mask predict_slide(const EnsembleModel& ensemble, const Slide& slide, int patch_size,
                          const EvaluationConfig& config = {}) {
    return infer_slide(ensemble, slide, patch_size, config).mask;
}

struct DiceScore {
    double value = 0.0;
    std::string slide_id;
    int center = 0;
    LesionClass lesion_class = LesionClass::negative;
};

struct Stat {
    double mean = 0.0;
    double std = 0.0; ///< sample standard deviation (0 for n < 2)
    std::size_t n = 0;
};

inline Stat summarize(const std::vector<double>& v) {
    Stat s;
    s.n = v.size();
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

struct StratifiedReport {
    Stat overall;
    std::map<int, Stat> per_center;
    std::map<LesionClass, Stat> per_class;
    std::vector<DiceScore> per_slide;
    std::map<int, double> uncertainty_by_center; ///< mean patch uncertainty (nats)
};

/// Aggregates per-slide Dice (the unit is the slide, not pooled pixels).
inline StratifiedReport build_report(std::vector<DiceScore> per_slide, std::map<int, double> uncertainty_by_center = {}) {
    StratifiedReport r;
    std::vector<double> all;
    std::map<int, std::vector<double>> by_center;
    std::map<LesionClass, std::vector<double>> by_class;
    for (const auto& d : per_slide) {
        all.push_back(d.value);
        by_center[d.center].push_back(d.value);
        by_class[d.lesion_class].push_back(d.value);
    }
    r.overall = summarize(all);
    for (const auto& [c, v] : by_center) r.per_center[c] = summarize(v);
    for (const auto& [c, v] : by_class) r.per_class[c] = summarize(v);
    r.per_slide = std::move(per_slide);
    r.uncertainty_by_center = std::move(uncertainty_by_center);
    return r;
}

/// Scores externally supplied predictions (one mask per slide, same order).
inline StratifiedReport evaluate_predictions(std::span<const Slide> slides, std::span<const Mask> predictions) {
    if (slides.size() != predictions.size()) throw DataError("prediction count differs from slide count");
    std::vector<DiceScore> scores;
    for (std::size_t i = 0; i < slides.size(); ++i)
        scores.push_back({dice(predictions[i], slides[i].mask), slides[i].id, slides[i].center, slides[i].lesion_class});
    return build_report(std::move(scores));
}

inline StratifiedReport evaluate(const EnsembleModel& ensemble, std::span<const Slide> test_slides, int patch_size,
                                 const EvaluationConfig& config = {}, const UncertaintyConfig& ucfg = {}, int jobs = 1) {
    if (test_slides.empty()) throw DataError("evaluate: empty test set");
    std::vector<SlideInference> inference(test_slides.size());
    parallel_for(test_slides.size(), jobs,
                 [&](std::size_t i) { inference[i] = infer_slide(ensemble, test_slides[i], patch_size, config, ucfg); });
    std::vector<DiceScore> scores;
    std::map<int, std::vector<double>> unc;
    for (std::size_t i = 0; i < test_slides.size(); ++i) {
        const Slide& s = test_slides[i];
        scores.push_back({dice(inference[i].mask, s.mask), s.id, s.center, s.lesion_class});
        auto& bucket = unc[s.center];
        bucket.insert(bucket.end(), inference[i].patch_uncertainty.begin(), inference[i].patch_uncertainty.end());
    }
    std::map<int, double> unc_mean;
    for (const auto& [c, v] : unc) unc_mean[c] = summarize(v).mean;
    return build_report(std::move(scores), std::move(unc_mean));
}

// ---- report formats ----

inline json to_json(const Stat& s) { return json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; }

inline Stat stat_from_json(const json& j) {
    return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("n").get<std::size_t>()};
}

inline json to_json(const StratifiedReport& r) {
    json per_center = json::object(), per_class = json::object(), unc = json::object(), slides = json::array();
    for (const auto& [c, s] : r.per_center) per_center[std::to_string(c)] = to_json(s);
    for (const auto& [c, s] : r.per_class) per_class[to_string(c)] = to_json(s);
    for (const auto& [c, u] : r.uncertainty_by_center) unc[std::to_string(c)] = u;
    for (const auto& d : r.per_slide)
        slides.push_back(
            {{"slide_id", d.slide_id}, {"center", d.center}, {"lesion_class", to_string(d.lesion_class)}, {"dice", d.value}});
    return json{{"aggregation", "per-slide mean"},
                {"overall", to_json(r.overall)},
                {"per_center", per_center},
                {"per_class", per_class},
                {"uncertainty_by_center", unc},
                {"per_slide", slides}};
}

inline StratifiedReport report_from_json(const json& j) {
    StratifiedReport r;
    r.overall = stat_from_json(j.at("overall"));
    for (const auto& [k, v] : j.at("per_center").items()) r.per_center[std::stoi(k)] = stat_from_json(v);
    for (const auto& [k, v] : j.at("per_class").items()) r.per_class[parse_lesion_class(k)] = stat_from_json(v);
    for (const auto& [k, v] : j.at("uncertainty_by_center").items()) r.uncertainty_by_center[std::stoi(k)] = v.get<double>();
    for (const auto& e : j.at("per_slide"))
        r.per_slide.push_back({e.at("dice").get<double>(), e.at("slide_id").get<std::string>(), e.at("center").get<int>(),
                               parse_lesion_class(e.at("lesion_class").get<std::string>())});
    return r;
}

/// One row per slide: id,center,class,dice.
inline std::string per_slide_csv(const StratifiedReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << "id,center,class,dice\n";
    for (const auto& d : r.per_slide) out << d.slide_id << ',' << d.center << ',' << to_string(d.lesion_class) << ',' << d.value << '\n';
    return out.str();
}

/// Plot data: stratum rows with Dice mean/std/n and (per center) mean patch uncertainty.
inline std::string plot_data_csv(const StratifiedReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << "stratum,key,dice_mean,dice_std,n,mean_uncertainty\n";
    out << "overall,all," << r.overall.mean << ',' << r.overall.std << ',' << r.overall.n << ",\n";
    for (const auto& [c, s] : r.per_center) {
        out << "center," << c << ',' << s.mean << ',' << s.std << ',' << s.n << ',';
        if (auto it = r.uncertainty_by_center.find(c); it != r.uncertainty_by_center.end()) out << it->second;
        out << '\n';
    }
    for (const auto& [c, s] : r.per_class) out << "class," << to_string(c) << ',' << s.mean << ',' << s.std << ',' << s.n << ",\n";
    return out.str();
}

/// Writes <stem>.json, <stem>.csv and <stem>_plot.csv into dir.
inline void write_report(const std::filesystem::path& dir, const std::string& stem, const StratifiedReport& r) {
    write_json_file(dir / (stem + ".json"), to_json(r));
    write_text_atomic(dir / (stem + ".csv"), per_slide_csv(r));
    write_text_atomic(dir / (stem + "_plot.csv"), plot_data_csv(r));
}

} // namespace uga
