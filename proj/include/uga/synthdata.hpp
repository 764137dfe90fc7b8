#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "uga/color.hpp"
#include "uga/error.hpp"
#include "uga/image.hpp"
#include "uga/json_util.hpp"
#include "uga/parallel.hpp"
#include "uga/png_io.hpp"
#include "uga/rng.hpp"

namespace uga {

enum class LesionClass { negative, itc, micro, macro };
inline constexpr std::array kLesionClasses{LesionClass::negative, LesionClass::itc, LesionClass::micro,
                                           LesionClass::macro};

enum class Split { train, pool, test };

inline const char* to_string(LesionClass c) {
    switch (c) {
    case LesionClass::negative: return "negative";
    case LesionClass::itc: return "itc";
    case LesionClass::micro: return "micro";
    case LesionClass::macro: return "macro";
    }
    return "?";
}

inline const char* to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::pool: return "pool";
    case Split::test: return "test";
    }
    return "?";
}

inline LesionClass parse_lesion_class(const std::string& s) {
    for (auto c : kLesionClasses)
        if (s == to_string(c)) return c;
    throw DataError("unknown lesion class: " + s);
}

inline Split parse_split(const std::string& s) {
    for (auto v : {Split::train, Split::pool, Split::test})
        if (s == to_string(v)) return v;
    throw DataError("unknown split: " + s);
}

/// Largest-component area bands (pixels) separating itc / micro / macro.
struct LesionThresholds {
    std::size_t itc_max = 50;
    std::size_t micro_max = 1000;
};

/// Area of the largest 4-connected foreground component.
inline std::size_t largest_component_area(const Mask& mask) {
    std::vector<std::uint8_t> visited(mask.data.size(), 0);
    std::vector<int> stack;
    std::size_t best = 0;
    const int w = mask.width, h = mask.height;
    for (int start = 0; start < w * h; ++start) {
        if (!mask.data[static_cast<std::size_t>(start)] || visited[static_cast<std::size_t>(start)]) continue;
        std::size_t area = 0;
        stack.push_back(start);
        visited[static_cast<std::size_t>(start)] = 1;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++area;
            const int y = p / w, x = p % w;
            const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (const auto& n : nbr) {
                if (n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h) continue;
                const auto q = static_cast<std::size_t>(n[1] * w + n[0]);
                if (mask.data[q] && !visited[q]) {
                    visited[q] = 1;
                    stack.push_back(static_cast<int>(q));
                }
            }
        }
        best = std::max(best, area);
    }
    return best;
}

inline LesionClass lesion_class_of(const Mask& mask, const LesionThresholds& t = {}) {
    const std::size_t area = largest_component_area(mask);
    if (area == 0) return LesionClass::negative;
    if (area <= t.itc_max) return LesionClass::itc;
    if (area <= t.micro_max) return LesionClass::micro;
    return LesionClass::macro;
}

struct LesionMix {
    double negative = 0.25;
    double itc = 0.25;
    double micro = 0.25;
    double macro = 0.25;

    double of(LesionClass c) const {
        switch (c) {
        case LesionClass::negative: return negative;
        case LesionClass::itc: return itc;
        case LesionClass::micro: return micro;
        case LesionClass::macro: return macro;
        }
        return 0.0;
    }
};

struct CohortSpec {
    int num_centers = 5;
    int slides_per_center = 16;
    int slide_size = 256;
    LesionMix lesion_class_mix;
    std::uint64_t seed = 1;
    int train_center = 0;

    // synthesis extensions
    double test_fraction = 0.25;   ///< per center, held out as untouched test slides
    double train_fraction = 0.667; ///< share of the train center's non-test slides used for training
    double lesion_contrast = 1.0;  ///< 0 = lesions indistinguishable from stroma, 1 = full signature
    double style_strength = 1.0;   ///< scales hue/saturation/brightness departures of non-train centers
    bool glass_margin = true;
    LesionThresholds thresholds;

    /// Throws ConfigError naming the offending key. `patch_size`, when given,
    /// enforces slide_size >= 4 * patch_size.
    void validate(int patch_size = 0) const {
        auto fail = [](const std::string& key, const std::string& msg) {
            throw ConfigError("cohort." + key + ": " + msg);
        };
        if (num_centers < 2) fail("num_centers", "must be >= 2");
        if (slides_per_center < 1) fail("slides_per_center", "must be >= 1");
        if (slide_size < 16) fail("slide_size", "must be >= 16");
        if (patch_size > 0 && slide_size < 4 * patch_size)
            fail("slide_size", "must be at least 4x the patch size (" + std::to_string(patch_size) + ")");
        if (train_center < 0 || train_center >= num_centers) fail("train_center", "out of range");
        double sum = 0.0;
        for (auto c : kLesionClasses) {
            const double v = lesion_class_mix.of(c);
            if (!(v >= 0.0)) fail("lesion_class_mix", std::string("entry '") + to_string(c) + "' must be >= 0");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) fail("lesion_class_mix", "entries must sum to 1");
        if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail("test_fraction", "must be in [0, 1)");
        if (!(train_fraction > 0.0 && train_fraction <= 1.0)) fail("train_fraction", "must be in (0, 1]");
        if (!(lesion_contrast >= 0.0 && lesion_contrast <= 1.0)) fail("lesion_contrast", "must be in [0, 1]");
        if (!(style_strength >= 0.0)) fail("style_strength", "must be >= 0");
        if (thresholds.itc_max >= thresholds.micro_max) fail("thresholds", "itc_max must be < micro_max");
    }
};

struct Slide {
    std::string id;
    int center = 0;
    Image image; ///< H x W x 3, values in [0, 1]
    Mask mask;   ///< 1 = metastasis
    LesionClass lesion_class = LesionClass::negative;
    Split split = Split::pool;
};

/// The training center keeps the identity style. Other centers get a paler
/// hematoxylin stain and an eosin stain that is alternately stronger and
/// weaker by center parity, then a slight hue, saturation and brightness shift.
inline CenterStyle center_style(const CohortSpec& spec, int center) {
    CenterStyle style;
    style.texture_seed = derive_seed(spec.seed, {0x5e71e, static_cast<std::uint64_t>(center)});
    if (center == spec.train_center) return style;
    Rng rng(derive_seed(spec.seed, {0xc0105, static_cast<std::uint64_t>(center)}));
    const double sign = (center % 2 == 0) ? 1.0 : -1.0;
    const double k = spec.style_strength;
    style.hematoxylin_scale = std::exp(-k * rng.uniform(0.35, 0.7));
    style.eosin_scale = std::exp(sign * k * rng.uniform(0.2, 0.5));
    style.hue_shift = std::clamp(-sign * k * rng.uniform(0.02, 0.06), -0.5, 0.5);
    style.saturation_scale = std::exp(k * rng.uniform(-0.2, 0.2));
    style.brightness_offset = std::clamp(k * rng.uniform(-0.04, 0.04), -0.2, 0.2);
    return style;
}

namespace detail {

/// Smooth value noise with lattice spacing `cell`, values in [0, 1].
inline std::vector<float> value_noise(int size, int cell, Rng& rng) {
    const int n = size / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(n * n));
    for (auto& v : lattice) v = rng.uniform();
    std::vector<float> out(static_cast<std::size_t>(size) * size);
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    for (int y = 0; y < size; ++y) {
        const int gy = y / cell;
        const double ty = smooth(static_cast<double>(y % cell) / cell);
        for (int x = 0; x < size; ++x) {
            const int gx = x / cell;
            const double tx = smooth(static_cast<double>(x % cell) / cell);
            const double a = lattice[static_cast<std::size_t>(gy * n + gx)];
            const double b = lattice[static_cast<std::size_t>(gy * n + gx + 1)];
            const double c = lattice[static_cast<std::size_t>((gy + 1) * n + gx)];
            const double d = lattice[static_cast<std::size_t>((gy + 1) * n + gx + 1)];
            const double top = a + (b - a) * tx;
            const double bottom = c + (d - c) * tx;
            out[static_cast<std::size_t>(y) * size + x] = static_cast<float>(top + (bottom - top) * ty);
        }
    }
    return out;
}

/// Star-shaped blob r(theta) = radius * (1 + sum_k a_k cos(k theta + phi_k)).
struct Blob {
    double cx = 0, cy = 0, radius = 0;
    std::array<double, 3> amp{};
    std::array<double, 3> phase{};

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double d = std::sqrt(dx * dx + dy * dy);
        if (d < 0.5) return true;
        const double theta = std::atan2(dy, dx);
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += amp[static_cast<std::size_t>(k)] * std::cos((k + 2) * theta + phase[static_cast<std::size_t>(k)]);
        return d <= radius * r;
    }
};

inline Blob random_blob(double area, double cx, double cy, double wobble, Rng& rng) {
    Blob b;
    b.cx = cx;
    b.cy = cy;
    b.radius = std::sqrt(area / std::numbers::pi);
    for (int k = 0; k < 3; ++k) {
        b.amp[static_cast<std::size_t>(k)] = rng.uniform(0.0, wobble);
        b.phase[static_cast<std::size_t>(k)] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    return b;
}

/// Paints the blob into `mask`; returns false (leaving mask untouched) when
/// any blob pixel would fall outside `allowed`.
inline bool paint_blob(const Blob& b, const Mask& allowed, Mask& mask) {
    const int reach = static_cast<int>(std::ceil(b.radius * 1.5)) + 1;
    const int x0 = static_cast<int>(b.cx) - reach, x1 = static_cast<int>(b.cx) + reach;
    const int y0 = static_cast<int>(b.cy) - reach, y1 = static_cast<int>(b.cy) + reach;
    std::vector<int> pixels;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            if (!b.contains(x, y)) continue;
            if (x < 0 || y < 0 || x >= mask.width || y >= mask.height || !allowed.at(y, x)) return false;
            pixels.push_back(y * mask.width + x);
        }
    for (int p : pixels) mask.data[static_cast<std::size_t>(p)] = 1;
    return !pixels.empty();
}

inline Mask tissue_region(int size, bool glass_margin, Rng& rng) {
    Mask tissue(size, size, 1);
    if (!glass_margin) return tissue;
    const double cx = size * rng.uniform(0.46, 0.54), cy = size * rng.uniform(0.46, 0.54);
    const double rx = size * rng.uniform(0.38, 0.46), ry = size * rng.uniform(0.38, 0.46);
    std::array<double, 3> amp{}, phase{};
    for (std::size_t k = 0; k < 3; ++k) {
        amp[k] = rng.uniform(0.0, 0.06);
        phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = (x - cx) / rx, dy = (y - cy) / ry;
            const double theta = std::atan2(dy, dx);
            double r = 1.0;
            for (std::size_t k = 0; k < 3; ++k) r += amp[k] * std::cos(static_cast<double>(k + 2) * theta + phase[k]);
            tissue.at(y, x) = (dx * dx + dy * dy) <= r * r ? 1 : 0;
        }
    return tissue;
}

inline double sample_area(LesionClass c, const LesionThresholds& t, Rng& rng) {
    const double itc = static_cast<double>(t.itc_max), micro = static_cast<double>(t.micro_max);
    switch (c) {
    case LesionClass::itc: return rng.uniform(std::min(6.0, itc * 0.5), itc * 0.85);
    case LesionClass::micro: return rng.uniform(itc * 2.5, micro * 0.9);
    case LesionClass::macro: return rng.uniform(micro * 1.5, micro * 3.5);
    case LesionClass::negative: break;
    }
    return 0.0;
}

/// Lesion mask whose largest component falls in the band of `target`.
inline Mask lesion_mask(LesionClass target, const Mask& tissue, const LesionThresholds& t, Rng& rng) {
    Mask mask(tissue.height, tissue.width);
    if (target == LesionClass::negative) return mask;
    const int size = tissue.width;
    for (int attempt = 0; attempt < 200; ++attempt) {
        std::fill(mask.data.begin(), mask.data.end(), 0);
        const double area = sample_area(target, t, rng);
        const double margin = std::sqrt(area / std::numbers::pi) * 1.3 + 2.0;
        const double cx = rng.uniform(margin, size - margin), cy = rng.uniform(margin, size - margin);
        if (!paint_blob(random_blob(area, cx, cy, 0.15, rng), tissue, mask)) continue;
        // small satellite foci around the main lesion
        const int satellites = rng.below(3);
        for (int s = 0; s < satellites; ++s) {
            const double sa = rng.uniform(4.0, static_cast<double>(t.itc_max) * 0.6);
            const double dist = margin + rng.uniform(4.0, 24.0);
            const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
            paint_blob(random_blob(sa, cx + dist * std::cos(ang), cy + dist * std::sin(ang), 0.1, rng), tissue, mask);
        }
        if (lesion_class_of(mask, t) == target) return mask;
    }
    throw DataError(std::string("could not synthesize a lesion of class ") + to_string(target));
}

struct Rgb {
    double r, g, b;
};

inline Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

/// Renders H&E-like tissue: pink stroma with sparse nuclei, lesions as a
/// purple-blue region with dense dark nuclei, white glass outside tissue.
inline Image render_slide(const Mask& tissue, const Mask& lesion, double contrast, std::uint64_t texture_seed, Rng& rng) {
    const int size = tissue.width;
    Rng texture_rng(texture_seed);
    const double nuclei_density = 0.012 * texture_rng.uniform(0.8, 1.25);
    const double lesion_nuclei_density = 0.16 * texture_rng.uniform(0.85, 1.15);

    const auto coarse = value_noise(size, 32, rng);
    const auto fine = value_noise(size, 8, rng);
    const Rgb stroma_dark{0.88, 0.56, 0.72}, stroma_light{0.97, 0.80, 0.88};
    const Rgb lesion_base{0.60, 0.40, 0.78};
    const Rgb nucleus{0.30, 0.16, 0.50}, lesion_nucleus{0.22, 0.10, 0.44};
    const Rgb glass{0.985, 0.985, 0.985};

    Image img(size, size, 3);
    auto put = [&](int y, int x, const Rgb& c) {
        img.at(0, y, x) = static_cast<float>(c.r);
        img.at(1, y, x) = static_cast<float>(c.g);
        img.at(2, y, x) = static_cast<float>(c.b);
    };
    auto get = [&](int y, int x) {
        return Rgb{img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)};
    };

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * size + x;
            if (!tissue.data[i]) {
                const double n = (rng.uniform() - 0.5) * 0.012;
                put(y, x, {glass.r + n, glass.g + n, glass.b + n});
                continue;
            }
            Rgb c = mix(stroma_dark, stroma_light, 0.6 * coarse[i] + 0.4 * fine[i]);
            if (lesion.data[i]) c = mix(c, lesion_base, contrast * (0.85 + 0.15 * fine[i]));
            const double n = (rng.uniform() - 0.5) * 0.03;
            put(y, x, {c.r + n, c.g + n, c.b + n});
        }

    // nuclei: small dark disks, clipped to their own region so the label
    // boundary stays exact
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * size + x;
            if (!tissue.data[i]) continue;
            const bool in_lesion = lesion.data[i] != 0;
            const double density = in_lesion ? nuclei_density + contrast * (lesion_nuclei_density - nuclei_density)
                                             : nuclei_density;
            if (!rng.bernoulli(density)) continue;
            const double radius = in_lesion ? rng.uniform(1.0, 1.8) : rng.uniform(0.7, 1.2);
            const Rgb ink = in_lesion ? mix(nucleus, lesion_nucleus, contrast) : nucleus;
            const double strength = rng.uniform(0.6, 0.95);
            const int reach = static_cast<int>(std::ceil(radius));
            for (int dy = -reach; dy <= reach; ++dy)
                for (int dx = -reach; dx <= reach; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= size || xx >= size) continue;
                    const std::size_t j = static_cast<std::size_t>(yy) * size + xx;
                    if (!tissue.data[j] || (lesion.data[j] != 0) != in_lesion) continue;
                    if (dx * dx + dy * dy > radius * radius) continue;
                    put(yy, xx, mix(get(yy, xx), ink, strength));
                }
        }
    return img;
}

inline void quantize_8bit(Image& img) {
    for (auto& v : img.data) v = static_cast<float>(png::to_byte(v)) / 255.0f;
}

/// Per-center class quotas by largest remainder, listed in class order.
inline std::vector<LesionClass> class_quota(const LesionMix& mix, int n) {
    std::array<int, 4> count{};
    std::array<double, 4> remainder{};
    int assigned = 0;
    for (std::size_t k = 0; k < 4; ++k) {
        const double exact = mix.of(kLesionClasses[k]) * n;
        count[k] = static_cast<int>(std::floor(exact));
        remainder[k] = exact - count[k];
        assigned += count[k];
    }
    while (assigned < n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < 4; ++k)
            if (remainder[k] > remainder[best]) best = k;
        ++count[best];
        remainder[best] = -1.0;
        ++assigned;
    }
    std::vector<LesionClass> out;
    for (std::size_t k = 0; k < 4; ++k) out.insert(out.end(), static_cast<std::size_t>(count[k]), kLesionClasses[k]);
    return out;
}

} // namespace detail

/// Deterministic synthetic multi-center cohort. Each slide draws its own RNG
/// stream from (seed, center, index), so generation order does not matter.
/// Images are quantized to 8 bits so that a PNG round trip is lossless.
inline std::vector<Slide> generate_cohort(const CohortSpec& spec, int jobs = 1) {
    spec.validate();
    const int n = spec.slides_per_center;
    std::vector<Slide> slides(static_cast<std::size_t>(spec.num_centers) * n);

    // class and split layout per center
    for (int c = 0; c < spec.num_centers; ++c) {
        const auto classes = detail::class_quota(spec.lesion_class_mix, n);
        const int test_every = spec.test_fraction > 0.0 ? std::max(1, static_cast<int>(std::lround(1.0 / spec.test_fraction))) : 0;
        int non_test = 0;
        for (int i = 0; i < n; ++i) {
            Slide& s = slides[static_cast<std::size_t>(c * n + i)];
            char id[32];
            std::snprintf(id, sizeof id, "c%d_s%03d", c, i);
            s.id = id;
            s.center = c;
            s.lesion_class = classes[static_cast<std::size_t>(i)];
            if (test_every > 0 && i % test_every == test_every - 1 && n > 1) {
                s.split = Split::test;
            } else if (c == spec.train_center) {
                const bool take = std::floor((non_test + 1) * spec.train_fraction) > std::floor(non_test * spec.train_fraction);
                s.split = take ? Split::train : Split::pool;
                ++non_test;
            } else {
                s.split = Split::pool;
            }
        }
    }

    parallel_for(slides.size(), jobs, [&](std::size_t k) {
        Slide& s = slides[k];
        const int index = static_cast<int>(k) % n;
        Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(s.center), static_cast<std::uint64_t>(index)}));
        const Mask tissue = detail::tissue_region(spec.slide_size, spec.glass_margin, rng);
        s.mask = detail::lesion_mask(s.lesion_class, tissue, spec.thresholds, rng);
        const CenterStyle style = center_style(spec, s.center);
        Image img = detail::render_slide(tissue, s.mask, spec.lesion_contrast, style.texture_seed, rng);
        apply_stain_scaling(img, style.hematoxylin_scale, style.eosin_scale);
        s.image = apply_center_style(img, style);
        detail::quantize_8bit(s.image);
    });
    return slides;
}

/// Loads an 8-bit image / single-channel mask pair as a slide.
inline Slide ingest_pair(const std::filesystem::path& image_file, const std::filesystem::path& mask_file, int center,
                         const std::string& id = {}, const LesionThresholds& thresholds = {}) {
    const png::Raster image = png::read(image_file);
    const png::Raster mask = png::read(mask_file);
    if (mask.channels != 1) throw DataError(mask_file.string() + ": mask must be single-channel");
    if (image.width != mask.width || image.height != mask.height)
        throw DataError("dimension mismatch: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                        " vs mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height));
    Slide s;
    s.id = id.empty() ? image_file.stem().string() : id;
    s.center = center;
    s.image = png::to_rgb_image(image);
    s.mask = png::to_mask(mask);
    s.lesion_class = lesion_class_of(s.mask, thresholds);
    s.split = Split::pool;
    return s;
}

// ---- JSON / manifest ----

inline json to_json(const CohortSpec& s) {
    return json{{"num_centers", s.num_centers},
                {"slides_per_center", s.slides_per_center},
                {"slide_size", s.slide_size},
                {"lesion_class_mix",
                 {{"negative", s.lesion_class_mix.negative},
                  {"itc", s.lesion_class_mix.itc},
                  {"micro", s.lesion_class_mix.micro},
                  {"macro", s.lesion_class_mix.macro}}},
                {"seed", s.seed},
                {"train_center", s.train_center},
                {"test_fraction", s.test_fraction},
                {"train_fraction", s.train_fraction},
                {"lesion_contrast", s.lesion_contrast},
                {"style_strength", s.style_strength},
                {"glass_margin", s.glass_margin},
                {"thresholds", {{"itc_max", s.thresholds.itc_max}, {"micro_max", s.thresholds.micro_max}}}};
}

inline CohortSpec cohort_spec_from_json(const json& j, const std::string& path = "cohort") {
    CohortSpec s;
    SectionReader r(j, path);
    r.get("num_centers", s.num_centers)
        .get("slides_per_center", s.slides_per_center)
        .get("slide_size", s.slide_size)
        .get("seed", s.seed)
        .get("train_center", s.train_center)
        .get("test_fraction", s.test_fraction)
        .get("train_fraction", s.train_fraction)
        .get("lesion_contrast", s.lesion_contrast)
        .get("style_strength", s.style_strength)
        .get("glass_margin", s.glass_margin);
    if (const json* mix = r.child("lesion_class_mix")) {
        SectionReader m(*mix, r.key_path("lesion_class_mix"));
        m.get("negative", s.lesion_class_mix.negative)
            .get("itc", s.lesion_class_mix.itc)
            .get("micro", s.lesion_class_mix.micro)
            .get("macro", s.lesion_class_mix.macro)
            .finish();
    }
    if (const json* t = r.child("thresholds")) {
        SectionReader m(*t, r.key_path("thresholds"));
        m.get("itc_max", s.thresholds.itc_max).get("micro_max", s.thresholds.micro_max).finish();
    }
    r.finish();
    return s;
}

/// Writes images/, masks/ and manifest.json under `dir`.
inline void write_cohort(const std::filesystem::path& dir, const std::vector<Slide>& slides, const CohortSpec* spec = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    json list = json::array();
    for (const Slide& s : slides) {
        const std::string image_rel = "images/" + s.id + ".png";
        const std::string mask_rel = "masks/" + s.id + ".png";
        png::write(dir / image_rel, png::from_image(s.image));
        png::write(dir / mask_rel, png::from_mask(s.mask));
        list.push_back({{"id", s.id},
                        {"center", s.center},
                        {"split", to_string(s.split)},
                        {"lesion_class", to_string(s.lesion_class)},
                        {"image", image_rel},
                        {"mask", mask_rel}});
    }
    json manifest{{"version", 1}, {"slides", list}};
    if (spec) {
        manifest["spec"] = to_json(*spec);
        json styles = json::array();
        for (int c = 0; c < spec->num_centers; ++c) {
            const auto st = center_style(*spec, c);
            styles.push_back({{"center", c},
                              {"hematoxylin_scale", st.hematoxylin_scale},
                              {"eosin_scale", st.eosin_scale},
                              {"hue_shift", st.hue_shift},
                              {"saturation_scale", st.saturation_scale},
                              {"brightness_offset", st.brightness_offset}});
        }
        manifest["center_styles"] = styles;
    }
    write_json_file(dir / "manifest.json", manifest);
}

inline std::vector<Slide> load_cohort(const std::filesystem::path& dir) {
    const json manifest = read_json_file(dir / "manifest.json");
    if (manifest.value("version", 0) != 1) throw DataError("unsupported cohort manifest version");
    std::vector<Slide> slides;
    for (const auto& e : manifest.at("slides")) {
        Slide s = ingest_pair(dir / e.at("image").get<std::string>(), dir / e.at("mask").get<std::string>(),
                              e.at("center").get<int>(), e.at("id").get<std::string>());
        s.split = parse_split(e.at("split").get<std::string>());
        s.lesion_class = parse_lesion_class(e.at("lesion_class").get<std::string>());
        slides.push_back(std::move(s));
    }
    return slides;
}

} // namespace uga
