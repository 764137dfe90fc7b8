#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <functional>
#include <string>
#include <tuple>
#include <vector>

#include "uga/color.hpp"
#include "uga/error.hpp"
#include "uga/json_util.hpp"
#include "uga/parallel.hpp"
#include "uga/png_io.hpp"
#include "uga/rng.hpp"
#include "uga/synthdata.hpp"
#include "uga/training.hpp"
#include "uga/uncertainty.hpp"

namespace uga {

enum class RankingKey { mean, total };
enum class SelectedBy { none, uga, random };
enum class ReviewStatus { pending, corrected, skipped };
enum class CorrectionSource { oracle, human };

inline const char* to_string(SelectedBy s) {
    switch (s) {
    case SelectedBy::none: return "none";
    case SelectedBy::uga: return "uga";
    case SelectedBy::random: return "random";
    }
    return "?";
}
inline const char* to_string(ReviewStatus s) {
    switch (s) {
    case ReviewStatus::pending: return "pending";
    case ReviewStatus::corrected: return "corrected";
    case ReviewStatus::skipped: return "skipped";
    }
    return "?";
}
inline const char* to_string(CorrectionSource s) { return s == CorrectionSource::oracle ? "oracle" : "human"; }
inline const char* to_string(RankingKey k) { return k == RankingKey::mean ? "mean" : "total"; }

inline SelectedBy parse_selected_by(const std::string& s) {
    for (auto v : {SelectedBy::none, SelectedBy::uga, SelectedBy::random})
        if (s == to_string(v)) return v;
    throw DataError("unknown selected_by: " + s);
}
inline CorrectionSource parse_correction_source(const std::string& s) {
    if (s == "oracle") return CorrectionSource::oracle;
    if (s == "human") return CorrectionSource::human;
    throw DataError("unknown correction_source: " + s);
}

struct SamplerConfig {
    int stride = 0;             ///< 0 = patch size (non-overlapping grid)
    double bg_threshold = 0.7;  ///< patches with a larger background fraction are dropped
    RankingKey ranking_key = RankingKey::mean;
    int augment_copies = 100;
    double hue_range = 0.1;     ///< augmentation hue rotation drawn from [-hue_range, hue_range]

    int effective_stride(int patch_size) const { return stride > 0 ? stride : patch_size; }

    void validate() const {
        if (stride < 0) throw ConfigError("sampler.stride: must be >= 0");
        if (!(bg_threshold >= 0.0 && bg_threshold <= 1.0)) throw ConfigError("sampler.bg_threshold: must be in [0, 1]");
        if (augment_copies < 1) throw ConfigError("sampler.augment_copies: must be >= 1");
        if (!(hue_range >= 0.0 && hue_range <= 0.5)) throw ConfigError("sampler.hue_range: must be in [0, 0.5]");
    }
};

inline json to_json(const SamplerConfig& c) {
    return json{{"stride", c.stride},
                {"bg_threshold", c.bg_threshold},
                {"ranking_key", to_string(c.ranking_key)},
                {"augment_copies", c.augment_copies},
                {"hue_range", c.hue_range}};
}

inline SamplerConfig sampler_config_from_json(const json& j, const std::string& path = "sampler") {
    SamplerConfig c;
    std::string key = to_string(c.ranking_key);
    SectionReader r(j, path);
    r.get("stride", c.stride)
        .get("bg_threshold", c.bg_threshold)
        .get("ranking_key", key)
        .get("augment_copies", c.augment_copies)
        .get("hue_range", c.hue_range)
        .finish();
    if (key == "mean")
        c.ranking_key = RankingKey::mean;
    else if (key == "total")
        c.ranking_key = RankingKey::total;
    else
        throw ConfigError(r.key_path("ranking_key") + ": expected 'mean' or 'total'");
    return c;
}

struct RankedPatch {
    PatchScore score;
    int rank_within_center = 0; ///< 1-based; 0 when not ranked (random draws)
    SelectedBy selected_by = SelectedBy::none;
    ReviewStatus review_status = ReviewStatus::pending;

    double key(RankingKey k) const { return k == RankingKey::mean ? score.mean_uncertainty : score.total_uncertainty; }
};

/// Stable identifier of a patch: "<slide_id>_x<x>_y<y>".
inline std::string patch_id(const std::string& slide_id, Point origin) {
    return slide_id + "_x" + std::to_string(origin.x) + "_y" + std::to_string(origin.y);
}
inline std::string patch_id(const RankedPatch& p) { return patch_id(p.score.slide_id, p.score.origin); }

/// Per-center ranked lists, keyed by center index.
using Ranking = std::map<int, std::vector<RankedPatch>>;

inline std::vector<Point> build_patch_grid(int height, int width, int patch_size, int stride) {
    if (patch_size < 1 || patch_size > height || patch_size > width)
        throw DataError("patch size " + std::to_string(patch_size) + " exceeds slide dimensions " +
                        std::to_string(width) + "x" + std::to_string(height));
    if (stride < 1) throw DataError("stride must be >= 1");
    std::vector<Point> out;
    for (int y = 0; y + patch_size <= height; y += stride)
        for (int x = 0; x + patch_size <= width; x += stride) out.push_back({x, y});
    return out;
}

inline std::vector<Point> build_patch_grid(const Slide& slide, int patch_size, int stride) {
    return build_patch_grid(slide.image.height, slide.image.width, patch_size, stride);
}

inline bool patches_overlap(Point a, Point b, int size) {
    return a.x < b.x + size && b.x < a.x + size && a.y < b.y + size && b.y < a.y + size;
}

namespace detail {

inline void require_not_test(std::span<const Slide> slides, const char* what) {
    for (const auto& s : slides)
        if (s.split == Split::test) throw DataError(std::string(what) + ": test-split slide " + s.id + " is not allowed");
}

inline void sort_and_rank(std::vector<RankedPatch>& list, RankingKey key) {
    std::sort(list.begin(), list.end(), [key](const RankedPatch& a, const RankedPatch& b) {
        const double ka = a.key(key), kb = b.key(key);
        if (ka != kb) return ka > kb;
        return std::tie(a.score.slide_id, a.score.origin.y, a.score.origin.x) <
               std::tie(b.score.slide_id, b.score.origin.y, b.score.origin.x);
    });
    for (std::size_t i = 0; i < list.size(); ++i) list[i].rank_within_center = static_cast<int>(i) + 1;
}

} // namespace detail

/// Scores every grid patch of every pool slide with the ensemble, drops
/// background-dominated patches and ranks each center by descending key
/// (ties by slide id, then y, then x).
inline Ranking rank_pool(std::span<const Slide> pool_slides, const EnsembleModel& ensemble, int patch_size,
                         const SamplerConfig& config = {}, const UncertaintyConfig& ucfg = {}, int jobs = 1) {
    if (pool_slides.empty()) throw DataError("rank_pool: empty pool");
    if (ensemble.k() < 2) throw DataError("rank_pool: ensemble needs at least 2 folds");
    detail::require_not_test(pool_slides, "rank_pool");
    const int stride = config.effective_stride(patch_size);
    std::vector<std::vector<RankedPatch>> per_slide(pool_slides.size());
    parallel_for(pool_slides.size(), jobs, [&](std::size_t i) {
        const Slide& slide = pool_slides[i];
        Workspace<float> ws;
        for (const Point origin : build_patch_grid(slide, patch_size, stride)) {
            const Image patch = slide.image.crop(origin, patch_size, patch_size);
            if (background_fraction(patch, ucfg.white_threshold, ucfg.black_threshold) > config.bg_threshold) continue;
            const auto maps = ensemble_log_probs(ensemble, patch, ws);
            UncertaintyMap umap = pixel_disagreement(maps, ucfg.variant);
            umap.origin = origin;
            umap.slide_id = slide.id;
            umap.center = slide.center;
            per_slide[i].push_back({score_patch(umap, patch, ucfg.white_threshold, ucfg.black_threshold)});
        }
    });
    Ranking ranking;
    for (auto& list : per_slide)
        for (auto& p : list) ranking[p.score.center].push_back(std::move(p));
    for (auto& [center, list] : ranking) detail::sort_and_rank(list, config.ranking_key);
    return ranking;
}

struct Selection {
    std::vector<RankedPatch> patches;
    std::vector<std::string> warnings;
};

/// Top-k per center, skipping patches that overlap an already selected patch
/// of the same slide.
inline Selection select_uga(const Ranking& ranked, int k_per_center, int patch_size) {
    Selection out;
    for (const auto& [center, list] : ranked) {
        std::vector<const RankedPatch*> taken;
        for (const auto& p : list) {
            if (static_cast<int>(taken.size()) >= k_per_center) break;
            const bool clash = std::any_of(taken.begin(), taken.end(), [&](const RankedPatch* t) {
                return t->score.slide_id == p.score.slide_id && patches_overlap(t->score.origin, p.score.origin, patch_size);
            });
            if (clash) continue;
            taken.push_back(&p);
        }
        if (static_cast<int>(taken.size()) < k_per_center)
            out.warnings.push_back("center " + std::to_string(center) + ": only " + std::to_string(taken.size()) +
                                   " of " + std::to_string(k_per_center) + " patches available");
        for (const RankedPatch* t : taken) {
            RankedPatch sel = *t;
            sel.selected_by = SelectedBy::uga;
            out.patches.push_back(std::move(sel));
        }
    }
    return out;
}

/// Seeded uniform draw without replacement among each center's foreground
/// grid patches, with the same non-overlap rule as select_uga.
inline Selection select_random(std::span<const Slide> pool_slides, int k_per_center, int patch_size,
                               const SamplerConfig& config, std::uint64_t seed, const UncertaintyConfig& ucfg = {}) {
    if (pool_slides.empty()) throw DataError("select_random: empty pool");
    detail::require_not_test(pool_slides, "select_random");
    const int stride = config.effective_stride(patch_size);
    std::map<int, std::vector<RankedPatch>> candidates;
    for (const auto& slide : pool_slides) {
        candidates[slide.center]; // centers with no foreground still get a warning
        for (const Point origin : build_patch_grid(slide, patch_size, stride)) {
            const double bg = background_fraction(slide.image.crop(origin, patch_size, patch_size), ucfg.white_threshold,
                                                  ucfg.black_threshold);
            if (bg > config.bg_threshold) continue;
            RankedPatch p;
            p.score.slide_id = slide.id;
            p.score.center = slide.center;
            p.score.origin = origin;
            p.score.background_fraction = bg;
            candidates[slide.center].push_back(std::move(p));
        }
    }
    Selection out;
    for (auto& [center, list] : candidates) {
        Rng rng(derive_seed(seed, {0x7a2d, static_cast<std::uint64_t>(center)}));
        rng.shuffle(list);
        int taken = 0;
        std::vector<const RankedPatch*> chosen;
        for (const auto& p : list) {
            if (taken >= k_per_center) break;
            const bool clash = std::any_of(chosen.begin(), chosen.end(), [&](const RankedPatch* t) {
                return t->score.slide_id == p.score.slide_id && patches_overlap(t->score.origin, p.score.origin, patch_size);
            });
            if (clash) continue;
            chosen.push_back(&p);
            ++taken;
        }
        if (taken < k_per_center)
            out.warnings.push_back("center " + std::to_string(center) + ": only " + std::to_string(taken) + " of " +
                                   std::to_string(k_per_center) + " foreground patches available");
        for (const RankedPatch* t : chosen) {
            RankedPatch sel = *t;
            sel.selected_by = SelectedBy::random;
            out.patches.push_back(std::move(sel));
        }
    }
    return out;
}

struct CorrectedPatch {
    Image patch; ///< un-normalized pixels
    Mask mask;
    std::string slide_id;
    Point origin;
    CorrectionSource source = CorrectionSource::oracle;

    LabeledPatch labeled() const { return {patch, mask}; }
};

inline const Slide& find_slide(std::span<const Slide> cohort, const std::string& id) {
    for (const auto& s : cohort)
        if (s.id == id) return s;
    throw DataError("unknown slide id: " + id);
}

/// Oracle correction: the ground-truth mask under the patch.
inline CorrectedPatch simulate_correction(const std::string& slide_id, Point origin, int patch_size,
                                          std::span<const Slide> cohort) {
    const Slide& s = find_slide(cohort, slide_id);
    if (s.split == Split::test) throw DataError("simulate_correction: slide " + slide_id + " is in the test split");
    return {s.image.crop(origin, patch_size, patch_size), s.mask.crop(origin, patch_size, patch_size), slide_id, origin,
            CorrectionSource::oracle};
}

inline CorrectedPatch simulate_correction(const RankedPatch& ref, int patch_size, std::span<const Slide> cohort) {
    return simulate_correction(ref.score.slide_id, ref.score.origin, patch_size, cohort);
}

struct AugmentTransform {
    bool flip_h = false;
    bool flip_v = false;
    double hue_shift = 0.0;
};

inline CorrectedPatch apply_transform(const CorrectedPatch& cp, const AugmentTransform& t) {
    CorrectedPatch out = cp;
    if (t.flip_h) {
        out.patch = flip_horizontal(out.patch);
        out.mask = flip_horizontal(out.mask);
    }
    if (t.flip_v) {
        out.patch = flip_vertical(out.patch);
        out.mask = flip_vertical(out.mask);
    }
    if (t.hue_shift != 0.0) out.patch = rotate_hue(out.patch, t.hue_shift);
    return out;
}

inline std::vector<AugmentTransform> augment_transforms(int n, double hue_range, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0xa06}));
    std::vector<AugmentTransform> out(static_cast<std::size_t>(std::max(n, 0)));
    for (auto& t : out) {
        t.flip_h = rng.bernoulli(0.5);
        t.flip_v = rng.bernoulli(0.5);
        t.hue_shift = hue_range > 0.0 ? rng.uniform(-hue_range, hue_range) : 0.0;
    }
    return out;
}

/// n copies with independent random flips (patch and mask alike) and hue
/// rotation (patch only).
inline std::vector<CorrectedPatch> augment(const CorrectedPatch& cp, int n = 100, double hue_range = 0.1,
                                           std::uint64_t seed = 0) {
    if (n < 1) throw DataError("augment: n must be >= 1");
    std::vector<CorrectedPatch> out;
    out.reserve(static_cast<std::size_t>(n));
    for (const auto& t : augment_transforms(n, hue_range, seed)) out.push_back(apply_transform(cp, t));
    return out;
}

/// Lazily augmented training set: entry i is transform (i % copies) of
/// patch (i / copies). Patch j draws its transforms from seed_of(j).
inline PatchSource augmented_source(std::vector<CorrectedPatch> patches, int copies, double hue_range,
                                    const std::function<std::uint64_t(std::size_t)>& seed_of) {
    if (copies < 1) throw DataError("augment: copies must be >= 1");
    auto base = std::make_shared<const std::vector<CorrectedPatch>>(std::move(patches));
    auto transforms = std::make_shared<std::vector<std::vector<AugmentTransform>>>();
    for (std::size_t j = 0; j < base->size(); ++j) transforms->push_back(augment_transforms(copies, hue_range, seed_of(j)));
    const auto n = static_cast<std::size_t>(copies);
    return {base->size() * n, [base, transforms, n](std::size_t i) {
                return apply_transform((*base)[i / n], (*transforms)[i / n][i % n]).labeled();
            }};
}

// ---- ranking file ----

inline json ranked_patch_json(const RankedPatch& p) {
    return json{{"slide_id", p.score.slide_id},
                {"center", p.score.center},
                {"x", p.score.origin.x},
                {"y", p.score.origin.y},
                {"total", p.score.total_uncertainty},
                {"mean", p.score.mean_uncertainty},
                {"background_fraction", p.score.background_fraction},
                {"rank", p.rank_within_center},
                {"selected_by", to_string(p.selected_by)}};
}

inline RankedPatch ranked_patch_from_json(const json& j) {
    RankedPatch p;
    p.score.slide_id = j.at("slide_id").get<std::string>();
    p.score.center = j.at("center").get<int>();
    p.score.origin = {j.at("x").get<int>(), j.at("y").get<int>()};
    p.score.total_uncertainty = j.at("total").get<double>();
    p.score.mean_uncertainty = j.at("mean").get<double>();
    p.score.background_fraction = j.at("background_fraction").get<double>();
    p.rank_within_center = j.at("rank").get<int>();
    p.selected_by = parse_selected_by(j.at("selected_by").get<std::string>());
    return p;
}

/// Ranking as a flat array, centers ascending, each in rank order.
inline json ranking_json(const Ranking& ranking) {
    json out = json::array();
    for (const auto& [center, list] : ranking)
        for (const auto& p : list) out.push_back(ranked_patch_json(p));
    return out;
}

inline json selection_json(const std::vector<RankedPatch>& patches) {
    json out = json::array();
    for (const auto& p : patches) out.push_back(ranked_patch_json(p));
    return out;
}

inline Ranking ranking_from_json(const json& j) {
    Ranking r;
    for (const auto& e : j) {
        RankedPatch p = ranked_patch_from_json(e);
        r[p.score.center].push_back(std::move(p));
    }
    return r;
}

// ---- corrected patches on disk: <id>_image.png, <id>_mask.png, <id>.json, plus index.json ----

inline void write_corrections(const std::filesystem::path& dir, const std::vector<CorrectedPatch>& patches,
                              const std::vector<RankedPatch>* refs = nullptr) {
    std::filesystem::create_directories(dir);
    json index = json::array();
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto& cp = patches[i];
        const std::string id = patch_id(cp.slide_id, cp.origin);
        png::write(dir / (id + "_image.png"), png::from_image(cp.patch));
        png::write(dir / (id + "_mask.png"), png::from_mask(cp.mask));
        json meta{{"id", id},
                  {"slide_id", cp.slide_id},
                  {"x", cp.origin.x},
                  {"y", cp.origin.y},
                  {"size", cp.patch.width},
                  {"correction_source", to_string(cp.source)}};
        if (refs && i < refs->size()) meta["selected_by"] = to_string((*refs)[i].selected_by);
        write_json_file(dir / (id + ".json"), meta);
        index.push_back(id);
    }
    write_json_file(dir / "index.json", index);
}

inline std::vector<CorrectedPatch> read_corrections(const std::filesystem::path& dir) {
    const json index = read_json_file(dir / "index.json");
    std::vector<CorrectedPatch> out;
    for (const auto& e : index) {
        const std::string id = e.get<std::string>();
        const json meta = read_json_file(dir / (id + ".json"));
        CorrectedPatch cp;
        cp.patch = png::to_rgb_image(png::read(dir / (id + "_image.png")));
        cp.mask = png::to_mask(png::read(dir / (id + "_mask.png")));
        cp.slide_id = meta.at("slide_id").get<std::string>();
        cp.origin = {meta.at("x").get<int>(), meta.at("y").get<int>()};
        cp.source = parse_correction_source(meta.at("correction_source").get<std::string>());
        out.push_back(std::move(cp));
    }
    return out;
}

} // namespace uga
