#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "uga/image.hpp"

namespace uga {

/// Per-center staining style. The stain scales are applied by the slide
/// renderer (apply_stain_scaling); apply_center_style covers the HSV part.
struct CenterStyle {
    double hematoxylin_scale = 1.0; ///< > 0, multiplies the hematoxylin concentration
    double eosin_scale = 1.0;       ///< > 0, multiplies the eosin concentration
    double hue_shift = 0.0;         ///< fraction of the hue circle, [-0.5, 0.5]
    double saturation_scale = 1.0;  ///< > 0
    double brightness_offset = 0.0; ///< [-0.2, 0.2], added to value
    std::uint64_t texture_seed = 0;

    bool stain_identity() const noexcept { return hematoxylin_scale == 1.0 && eosin_scale == 1.0; }
    bool hsv_identity() const noexcept {
        return hue_shift == 0.0 && saturation_scale == 1.0 && brightness_offset == 0.0;
    }
};

struct Hsv {
    double h = 0.0; ///< [0, 1)
    double s = 0.0;
    double v = 0.0;
};

inline Hsv rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) return out;
    double h;
    if (mx == r)
        h = (g - b) / d;
    else if (mx == g)
        h = 2.0 + (b - r) / d;
    else
        h = 4.0 + (r - g) / d;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
    out.h = h;
    return out;
}

inline std::array<double, 3> hsv_to_rgb(const Hsv& c) {
    if (c.s <= 0.0) return {c.v, c.v, c.v};
    double h = (c.h - std::floor(c.h)) * 6.0;
    if (h >= 6.0) h = 0.0;
    const int sector = static_cast<int>(h);
    const double f = h - sector;
    const double p = c.v * (1.0 - c.s);
    const double q = c.v * (1.0 - c.s * f);
    const double t = c.v * (1.0 - c.s * (1.0 - f));
    switch (sector) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
    }
}

namespace detail {

/// Rows: hematoxylin, eosin and residual optical-density directions (unit
/// length), after Ruifrok and Johnston.
inline std::array<std::array<double, 3>, 3> stain_matrix() {
    std::array<std::array<double, 3>, 3> m{{{0.650, 0.704, 0.286}, {0.072, 0.990, 0.105}, {0.268, 0.570, 0.776}}};
    for (auto& row : m) {
        const double n = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
        for (auto& v : row) v /= n;
    }
    return m;
}

inline std::array<std::array<double, 3>, 3> inverse3(const std::array<std::array<double, 3>, 3>& a) {
    const double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                       a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                       a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    std::array<std::array<double, 3>, 3> inv{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    return inv;
}

} // namespace detail

/// Rescales hematoxylin and eosin concentrations in optical density
/// (Beer-Lambert). Pure white stays white.
inline void apply_stain_scaling(Image& image, double hematoxylin_scale, double eosin_scale) {
    if (image.channels != 3) throw DataError("apply_stain_scaling expects a 3-channel image");
    if (hematoxylin_scale == 1.0 && eosin_scale == 1.0) return;
    static const auto m = detail::stain_matrix();
    static const auto inv = detail::inverse3(m);
    const std::size_t n = image.plane_size();
    auto r = image.plane(0), g = image.plane(1), b = image.plane(2);
    for (std::size_t i = 0; i < n; ++i) {
        const std::array<double, 3> od{-std::log(std::max<double>(r[i], 1e-3)), -std::log(std::max<double>(g[i], 1e-3)),
                                       -std::log(std::max<double>(b[i], 1e-3))};
        std::array<double, 3> conc{};
        for (int s = 0; s < 3; ++s) conc[s] = od[0] * inv[0][s] + od[1] * inv[1][s] + od[2] * inv[2][s];
        conc[0] *= hematoxylin_scale;
        conc[1] *= eosin_scale;
        for (int ch = 0; ch < 3; ++ch) {
            const double v = conc[0] * m[0][ch] + conc[1] * m[1][ch] + conc[2] * m[2][ch];
            const float out = static_cast<float>(std::clamp(std::exp(-v), 0.0, 1.0));
            (ch == 0 ? r : ch == 1 ? g : b)[i] = out;
        }
    }
}

/// Pixelwise HSV transform of a 3-channel image with values in [0, 1]. The
/// identity style returns the input unchanged (no round trip through HSV).
/// Gray pixels keep their hue-less color under any hue rotation.
inline Image apply_center_style(const Image& image, const CenterStyle& style) {
    if (image.channels != 3) throw DataError("apply_center_style expects a 3-channel image");
    if (style.hsv_identity()) return image;
    Image out = image;
    const std::size_t n = image.plane_size();
    auto r = out.plane(0), g = out.plane(1), b = out.plane(2);
    for (std::size_t i = 0; i < n; ++i) {
        Hsv c = rgb_to_hsv(r[i], g[i], b[i]);
        c.h += style.hue_shift;
        c.h -= std::floor(c.h);
        c.s = std::clamp(c.s * style.saturation_scale, 0.0, 1.0);
        c.v = std::clamp(c.v + style.brightness_offset, 0.0, 1.0);
        const auto rgb = hsv_to_rgb(c);
        r[i] = static_cast<float>(std::clamp(rgb[0], 0.0, 1.0));
        g[i] = static_cast<float>(std::clamp(rgb[1], 0.0, 1.0));
        b[i] = static_cast<float>(std::clamp(rgb[2], 0.0, 1.0));
    }
    return out;
}

inline Image rotate_hue(const Image& image, double shift) {
    return apply_center_style(image, CenterStyle{.hue_shift = shift});
}

} // namespace uga
