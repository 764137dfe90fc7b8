#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uga/error.hpp"

namespace uga {

/// Integer pixel position; x is the column, y the row.
struct Point {
    int x = 0;
    int y = 0;

    friend bool operator==(const Point&, const Point&) = default;
};

/// Planar (channel-major) float raster.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height) * width; }

    float& at(int c, int y, int x) noexcept {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const noexcept {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    std::span<float> plane(int c) noexcept {
        return {data.data() + c * plane_size(), plane_size()};
    }
    std::span<const float> plane(int c) const noexcept {
        return {data.data() + c * plane_size(), plane_size()};
    }

    Image crop(Point origin, int h, int w) const {
        if (origin.x < 0 || origin.y < 0 || origin.x + w > width || origin.y + h > height)
            throw DataError("crop window outside image");
        Image out(h, w, channels);
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    out.at(c, y, x) = at(c, origin.y + y, origin.x + x);
        return out;
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Binary raster, one byte per pixel holding 0 or 1.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const noexcept { return data[static_cast<std::size_t>(y) * width + x]; }

    std::size_t count() const noexcept {
        std::size_t n = 0;
        for (auto v : data) n += v != 0;
        return n;
    }
    bool empty() const noexcept { return count() == 0; }

    Mask crop(Point origin, int h, int w) const {
        if (origin.x < 0 || origin.y < 0 || origin.x + w > width || origin.y + h > height)
            throw DataError("crop window outside mask");
        Mask out(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out.at(y, x) = at(origin.y + y, origin.x + x);
        return out;
    }

    friend bool operator==(const Mask&, const Mask&) = default;
};

inline Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

inline Image flip_vertical(const Image& img) {
    Image out(img.height, img.width, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, img.height - 1 - y, x);
    return out;
}

inline Mask flip_horizontal(const Mask& m) {
    Mask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
    return out;
}

inline Mask flip_vertical(const Mask& m) {
    Mask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(m.height - 1 - y, x);
    return out;
}

} // namespace uga
