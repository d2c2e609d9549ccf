#pragma once

#include <cstdio>
#include <memory>
#include <string>

#include <png.h>

#include "nmim/common.hpp"
#include "nmim/image.hpp"

namespace nmim {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace detail

// Reads an 8-bit PNG as RGB floats in [0,1]. Palette, grayscale and alpha
// inputs are expanded or stripped to plain RGB.
inline Image read_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    require(fp != nullptr, "read_png: cannot open ", path);

    png_byte header[8];
    require(std::fread(header, 1, 8, fp.get()) == 8 && png_sig_cmp(header, 0, 8) == 0,
            "read_png: ", path, " is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, "read_png: libpng init failed for ", path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail("read_png: libpng info init failed for ", path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("read_png: decode error in ", path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);
    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image img(static_cast<int>(height), static_cast<int>(width), 3);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    require(row.size() >= static_cast<size_t>(width) * 3,
            "read_png: unexpected row size in ", path);
    for (png_uint_32 y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < width; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                img.at(static_cast<int>(y), static_cast<int>(x), ch) =
                    static_cast<float>(row[x * 3 + static_cast<png_uint_32>(ch)]) / 255.0f;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

// Writes an RGB image as 8-bit PNG; values are clamped to [0,1] and rounded.
inline void write_png(const std::string& path, const Image& img) {
    require(img.c == 3, "write_png: expected 3 channels, got ", img.c);
    require(img.h > 0 && img.w > 0, "write_png: empty image for ", path);
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(fp != nullptr, "write_png: cannot open ", path, " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, "write_png: libpng init failed for ", path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail("write_png: libpng info init failed for ", path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("write_png: encode error for ", path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                const float v = std::clamp(img.at(y, x, ch), 0.0f, 1.0f);
                row[static_cast<size_t>(x) * 3 + static_cast<size_t>(ch)] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace nmim
