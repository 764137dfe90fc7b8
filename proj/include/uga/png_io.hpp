#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "uga/error.hpp"
#include "uga/image.hpp"

namespace uga::png {

/// 8-bit interleaved raster as stored in PNG files.
struct Raster {
    int height = 0;
    int width = 0;
    int channels = 0; ///< 1 gray, 3 RGB, 4 RGBA
    std::vector<std::uint8_t> pixels;
};

namespace detail {

struct MemoryReader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t offset = 0;
};

inline void read_from_memory(png_structp png, png_bytep out, png_size_t count) {
    auto* src = static_cast<MemoryReader*>(png_get_io_ptr(png));
    if (src->offset + count > src->size) png_error(png, "truncated PNG data");
    std::memcpy(out, src->data + src->offset, count);
    src->offset += count;
}

inline void write_to_vector(png_structp png, png_bytep data, png_size_t count) {
    auto* dst = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    dst->insert(dst->end(), data, data + count);
}

inline void flush_noop(png_structp) {}

[[noreturn]] inline void on_error(png_structp png, png_const_charp msg) {
    auto* text = static_cast<std::string*>(png_get_error_ptr(png));
    if (text) *text = msg;
    png_longjmp(png, 1);
}

inline void on_warning(png_structp, png_const_charp) {}

} // namespace detail

inline std::vector<std::uint8_t> encode(const Raster& r) {
    int color_type;
    switch (r.channels) {
    case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
    case 3: color_type = PNG_COLOR_TYPE_RGB; break;
    case 4: color_type = PNG_COLOR_TYPE_RGBA; break;
    default: throw DataError("unsupported channel count for PNG");
    }
    if (r.pixels.size() != static_cast<std::size_t>(r.height) * r.width * r.channels)
        throw DataError("raster size does not match dimensions");

    std::string message;
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, detail::on_error, detail::on_warning);
    if (!png) throw DataError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("PNG encode failed: " + message);
    }
    png_set_write_fn(png, &out, detail::write_to_vector, detail::flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    for (int y = 0; y < r.height; ++y)
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(r.pixels.data() + static_cast<std::size_t>(y) * r.width * r.channels);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

/// Decodes 8-bit PNGs; palette and low-bit-depth inputs are expanded, 16-bit
/// inputs are rejected.
inline Raster decode(const std::uint8_t* data, std::size_t size) {
    if (size < 8 || png_sig_cmp(data, 0, 8) != 0) throw DataError("not a PNG stream");
    std::string message;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, detail::on_error, detail::on_warning);
    if (!png) throw DataError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    detail::MemoryReader reader{data, size};
    Raster r;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("PNG decode failed: " + message);
    }
    png_set_read_fn(png, &reader, detail::read_from_memory);
    png_read_info(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    if (bit_depth == 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("16-bit PNG not supported; expected 8-bit raster");
    }
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    r.width = static_cast<int>(png_get_image_width(png, info));
    r.height = static_cast<int>(png_get_image_height(png, info));
    r.channels = png_get_channels(png, info);
    r.pixels.resize(static_cast<std::size_t>(r.height) * r.width * r.channels);
    rows.resize(static_cast<std::size_t>(r.height));
    for (int y = 0; y < r.height; ++y)
        rows[static_cast<std::size_t>(y)] = r.pixels.data() + static_cast<std::size_t>(y) * r.width * r.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return r;
}

inline Raster decode(const std::vector<std::uint8_t>& bytes) { return decode(bytes.data(), bytes.size()); }

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read file: " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Raster read(const std::filesystem::path& path) {
    try {
        return decode(read_bytes(path));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

inline void write(const std::filesystem::path& path, const Raster& r) {
    const auto bytes = encode(r);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write file: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + path.string());
}

inline std::uint8_t to_byte(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline Raster from_image(const Image& img) {
    Raster r{img.height, img.width, img.channels, {}};
    r.pixels.resize(static_cast<std::size_t>(img.height) * img.width * img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                r.pixels[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] = to_byte(img.at(c, y, x));
    return r;
}

/// Gray and RGBA rasters are converted to RGB (gray replicated, alpha dropped).
inline Image to_rgb_image(const Raster& r) {
    if (r.channels < 1 || r.channels > 4) throw DataError("unsupported channel count");
    Image img(r.height, r.width, 3);
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x) {
            const std::uint8_t* px = r.pixels.data() + (static_cast<std::size_t>(y) * r.width + x) * r.channels;
            for (int c = 0; c < 3; ++c) {
                const std::uint8_t v = r.channels >= 3 ? px[c] : px[0];
                img.at(c, y, x) = static_cast<float>(v) / 255.0f;
            }
        }
    return img;
}

inline Raster from_mask(const Mask& m) {
    Raster r{m.height, m.width, 1, std::vector<std::uint8_t>(m.data.size())};
    for (std::size_t i = 0; i < m.data.size(); ++i) r.pixels[i] = m.data[i] ? 255 : 0;
    return r;
}

/// Binarizes a single-channel raster at 128.
inline Mask to_mask(const Raster& r) {
    if (r.channels != 1) throw DataError("mask must be single-channel, got " + std::to_string(r.channels) + " channels");
    Mask m(r.height, r.width);
    for (std::size_t i = 0; i < r.pixels.size(); ++i) m.data[i] = r.pixels[i] >= 128 ? 1 : 0;
    return m;
}

inline bool has_png_signature(const std::vector<std::uint8_t>& bytes) {
    static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    return bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0;
}

} // namespace uga::png
