#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "uga/error.hpp"
#include "uga/image.hpp"
#include "uga/json_util.hpp"
#include "uga/png_io.hpp"
#include "uga/training.hpp"

namespace uga {

/// How each fold's log-softmax is contrasted with the fold mean.
enum class DisagreementVariant {
    /// mean_i KL(q || p_i) with q the normalized geometric mean of the folds
    geometric_kl,
    /// mean_i sum_c p_i(c) (log p_i(c) - mean_j log p_j(c)), fold mean left unnormalized
    fold_weighted_raw,
};

inline const char* to_string(DisagreementVariant v) {
    return v == DisagreementVariant::geometric_kl ? "geometric_kl" : "fold_weighted_raw";
}

inline DisagreementVariant parse_variant(const std::string& s) {
    if (s == "geometric_kl") return DisagreementVariant::geometric_kl;
    if (s == "fold_weighted_raw") return DisagreementVariant::fold_weighted_raw;
    throw ConfigError("uncertainty.variant: unknown value '" + s + "'");
}

struct UncertaintyConfig {
    DisagreementVariant variant = DisagreementVariant::geometric_kl;
    double white_threshold = 0.9; ///< luminance >= this counts as background
    double black_threshold = 0.1; ///< luminance <= this counts as background

    void validate() const {
        if (!(black_threshold < white_threshold)) throw ConfigError("uncertainty.black_threshold: must be < white_threshold");
    }
};

inline json to_json(const UncertaintyConfig& c) {
    return json{{"variant", to_string(c.variant)},
                {"white_threshold", c.white_threshold},
                {"black_threshold", c.black_threshold}};
}

inline UncertaintyConfig uncertainty_config_from_json(const json& j, const std::string& path = "uncertainty") {
    UncertaintyConfig c;
    std::string variant = to_string(c.variant);
    SectionReader r(j, path);
    r.get("variant", variant).get("white_threshold", c.white_threshold).get("black_threshold", c.black_threshold).finish();
    c.variant = parse_variant(variant);
    return c;
}

/// Per-pixel disagreement scores (nats) for one patch.
struct UncertaintyMap {
    int height = 0;
    int width = 0;
    std::vector<double> scores; ///< row-major, all >= 0
    Point origin;               ///< slide coordinates of the patch
    std::string slide_id;
    int center = 0;

    double at(int y, int x) const { return scores[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

inline double log_add_exp(double a, double b) {
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Sums in ascending order so the result does not depend on input order.
inline double canonical_sum(std::span<double> values) {
    std::sort(values.begin(), values.end());
    double s = 0.0;
    for (double v : values) s += v;
    return s;
}

} // namespace detail

/// Ensemble disagreement per pixel from K two-class log-probability maps.
///
/// With M(c) the fold mean of log p_i(c) and q = exp(M) / sum exp(M), the
/// default variant is mean_i KL(q || p_i). Because mean_i log p_i = M, this
/// collapses to -log sum_c exp(M(c)), which is what is evaluated here; it is
/// zero exactly where all folds agree.
inline UncertaintyMap pixel_disagreement(std::span<const Image> log_prob_maps,
                                         DisagreementVariant variant = DisagreementVariant::geometric_kl) {
    const std::size_t k = log_prob_maps.size();
    if (k < 2) throw DataError("pixel_disagreement needs at least 2 folds");
    const int h = log_prob_maps[0].height, w = log_prob_maps[0].width;
    for (const auto& m : log_prob_maps)
        if (m.height != h || m.width != w || m.channels != 2)
            throw DataError("fold log-probability maps must all be HxWx2 with equal dimensions");

    UncertaintyMap out;
    out.height = h;
    out.width = w;
    out.scores.resize(static_cast<std::size_t>(h) * w);
    const std::size_t plane = out.scores.size();
    std::vector<double> l0(k), l1(k), terms(k);
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t i = 0; i < k; ++i) {
            double a = log_prob_maps[i].data[p];
            double b = log_prob_maps[i].data[plane + p];
            const double lse = detail::log_add_exp(a, b);
            if (!std::isfinite(lse) || std::abs(std::expm1(lse)) > 1e-6)
                throw DataError("fold log-probabilities are not normalized at pixel " + std::to_string(p));
            l0[i] = a - lse;
            l1[i] = b - lse;
        }
        double score;
        if (variant == DisagreementVariant::geometric_kl) {
            std::vector<double> s0 = l0, s1 = l1;
            const double m0 = detail::canonical_sum(s0) / static_cast<double>(k);
            const double m1 = detail::canonical_sum(s1) / static_cast<double>(k);
            score = -detail::log_add_exp(m0, m1);
        } else {
            std::vector<double> s0 = l0, s1 = l1;
            const double m0 = detail::canonical_sum(s0) / static_cast<double>(k);
            const double m1 = detail::canonical_sum(s1) / static_cast<double>(k);
            for (std::size_t i = 0; i < k; ++i)
                terms[i] = std::exp(l0[i]) * (l0[i] - m0) + std::exp(l1[i]) * (l1[i] - m1);
            score = detail::canonical_sum(terms) / static_cast<double>(k);
        }
        out.scores[p] = std::max(score, 0.0);
    }
    return out;
}

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

/// Fraction of pixels that are white (luminance >= white) or black
/// (luminance <= black). Expects the un-normalized patch.
inline double background_fraction(const Image& patch, double white = 0.9, double black = 0.1) {
    if (patch.channels != 3) throw DataError("background_fraction expects a 3-channel patch");
    const std::size_t n = patch.plane_size();
    if (n == 0) return 0.0;
    const auto r = patch.plane(0), g = patch.plane(1), b = patch.plane(2);
    std::size_t bg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double y = luminance(r[i], g[i], b[i]);
        bg += (y >= white || y <= black) ? 1 : 0;
    }
    return static_cast<double>(bg) / static_cast<double>(n);
}

struct PatchScore {
    std::string slide_id;
    int center = 0;
    Point origin;
    double total_uncertainty = 0.0; ///< nats, sum over pixels
    double mean_uncertainty = 0.0;  ///< total / pixel count
    double background_fraction = 0.0;
};

inline PatchScore score_patch(const UncertaintyMap& umap, const Image& patch, double white = 0.9, double black = 0.1) {
    if (umap.height != patch.height || umap.width != patch.width)
        throw DataError("uncertainty map and patch dimensions differ");
    PatchScore s;
    s.slide_id = umap.slide_id;
    s.center = umap.center;
    s.origin = umap.origin;
    for (double v : umap.scores) s.total_uncertainty += v;
    s.mean_uncertainty = umap.scores.empty() ? 0.0 : s.total_uncertainty / static_cast<double>(umap.scores.size());
    s.background_fraction = background_fraction(patch, white, black);
    return s;
}

/// RGBA overlay: scores max-normalized per map, yellow-to-red ramp, opacity
/// proportional to the normalized score. All-zero maps are fully transparent.
inline png::Raster render_heatmap(const UncertaintyMap& umap) {
    png::Raster r{umap.height, umap.width, 4, std::vector<std::uint8_t>(umap.scores.size() * 4, 0)};
    const double peak = umap.scores.empty() ? 0.0 : *std::max_element(umap.scores.begin(), umap.scores.end());
    if (!(peak > 0.0)) return r;
    for (std::size_t i = 0; i < umap.scores.size(); ++i) {
        const double t = umap.scores[i] / peak;
        std::uint8_t* px = r.pixels.data() + i * 4;
        px[0] = 255;
        px[1] = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
        px[2] = 0;
        px[3] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
    return r;
}

// ---- UGAU serialization: "UGAU", u32 height, u32 width, f32 scores row-major, little-endian ----

inline std::vector<std::uint8_t> encode_uncertainty_map(const UncertaintyMap& m) {
    std::vector<std::uint8_t> out{'U', 'G', 'A', 'U'};
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.height));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.width));
    for (double v : m.scores) detail::put_le<float>(out, static_cast<float>(v));
    return out;
}

inline UncertaintyMap decode_uncertainty_map(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "UGAU", 4) != 0) throw DataError("not a UGAU file");
    std::size_t pos = 4;
    UncertaintyMap m;
    m.height = static_cast<int>(detail::get_le<std::uint32_t>(bytes, pos));
    m.width = static_cast<int>(detail::get_le<std::uint32_t>(bytes, pos));
    const std::size_t n = static_cast<std::size_t>(m.height) * m.width;
    if (bytes.size() != pos + n * 4) throw DataError("UGAU size mismatch");
    m.scores.resize(n);
    for (auto& v : m.scores) v = detail::get_le<float>(bytes, pos);
    return m;
}

/// Fold log-probabilities for one raw patch (normalized once, shared by all folds).
inline std::vector<Image> ensemble_log_probs(const EnsembleModel& model, const Image& patch, Workspace<float>& ws) {
    const Image normalized = zscore_normalize(patch);
    std::vector<Image> maps;
    maps.reserve(model.k());
    for (const auto& fold : model.folds) maps.push_back(predict_log_probs(fold, normalized, true, ws));
    return maps;
}

} // namespace uga
