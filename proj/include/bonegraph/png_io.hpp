#pragma once

// Grayscale PNG reading and writing (8- and 16-bit) on top of libpng.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace bonegraph {

struct GrayImage {
    std::int64_t width = 0;
    std::int64_t height = 0;
    int bit_depth = 8;                 // 8 or 16
    std::vector<std::uint16_t> pixels;  // row-major, one sample per pixel

    double max_value() const { return bit_depth == 8 ? 255.0 : 65535.0; }

    std::vector<double> to_unit() const {
        std::vector<double> out(pixels.size());
        const double m = max_value();
        for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = static_cast<double>(pixels[i]) / m;
        return out;
    }

    static GrayImage from_unit(const std::vector<double>& values, std::int64_t h, std::int64_t w,
                               int bit_depth = 8) {
        if (static_cast<std::int64_t>(values.size()) != h * w)
            throw std::invalid_argument("gray image: value count does not match dimensions");
        GrayImage img;
        img.width = w;
        img.height = h;
        img.bit_depth = bit_depth;
        img.pixels.resize(values.size());
        const double m = img.max_value();
        for (std::size_t i = 0; i < values.size(); ++i) {
            double v = values[i];
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            img.pixels[i] = static_cast<std::uint16_t>(v * m + 0.5);
        }
        return img;
    }
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline GrayImage read_gray_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("png: cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png: allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png: allocation failed");
    }
    std::vector<png_bytep> row_ptrs;
    std::vector<png_byte> raw;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png: failed to decode '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const png_byte color_type = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (color_type != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png: '" + path + "' is not a grayscale image");
    }
    if (depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
        depth = 8;
    }
    png_read_update_info(png, info);
    const std::int64_t w = png_get_image_width(png, info);
    const std::int64_t h = png_get_image_height(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    raw.resize(rowbytes * static_cast<std::size_t>(h));
    row_ptrs.resize(static_cast<std::size_t>(h));
    for (std::int64_t r = 0; r < h; ++r) row_ptrs[r] = raw.data() + rowbytes * static_cast<std::size_t>(r);
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    GrayImage img;
    img.width = w;
    img.height = h;
    img.bit_depth = depth;
    img.pixels.resize(static_cast<std::size_t>(w * h));
    if (depth == 8) {
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) img.pixels[r * w + c] = raw[r * rowbytes + c];
    } else {
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                const png_byte hi = raw[r * rowbytes + 2 * c];
                const png_byte lo = raw[r * rowbytes + 2 * c + 1];
                img.pixels[r * w + c] = static_cast<std::uint16_t>((hi << 8) | lo);
            }
    }
    return img;
}

inline void write_gray_png(const std::string& path, const GrayImage& img) {
    if (img.bit_depth != 8 && img.bit_depth != 16)
        throw std::invalid_argument("png: bit depth must be 8 or 16");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("png: cannot write '" + path + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png: allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png: allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png: failed to encode '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 img.bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t bpp = img.bit_depth == 8 ? 1 : 2;
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * bpp);
    for (std::int64_t r = 0; r < img.height; ++r) {
        for (std::int64_t c = 0; c < img.width; ++c) {
            const std::uint16_t v = img.pixels[r * img.width + c];
            if (bpp == 1) {
                row[c] = static_cast<png_byte>(v & 0xff);
            } else {
                row[2 * c] = static_cast<png_byte>(v >> 8);
                row[2 * c + 1] = static_cast<png_byte>(v & 0xff);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace bonegraph
