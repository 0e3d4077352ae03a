#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace icl {

/// RGB image stored channel-first as [3, H, W]. File space is [0, 1]; model space is [-1, 1].
using Image = Tensor<float>;

inline Image make_image(int64_t h, int64_t w, float fill = 0.0f) { return Image({3, h, w}, fill); }

inline int64_t image_height(const Image& img) { return img.dim(1); }
inline int64_t image_width(const Image& img) { return img.dim(2); }

inline float& pixel(Image& img, int64_t c, int64_t y, int64_t x) {
    return img[(c * img.shape[1] + y) * img.shape[2] + x];
}
inline float pixel(const Image& img, int64_t c, int64_t y, int64_t x) {
    return img[(c * img.shape[1] + y) * img.shape[2] + x];
}

inline void check_image(const Image& img, const std::string& what) {
    check_shape(img.rank() == 3 && img.shape[0] == 3, what + ": expected [3, H, W], got " + shape_str(img.shape));
}

inline Image to_model_space(const Image& img) {
    Image out(img.shape);
    for (int64_t i = 0; i < img.size(); i++) {
        out[i] = img[i] * 2.0f - 1.0f;
    }
    return out;
}

inline Image to_file_space(const Image& img) {
    Image out(img.shape);
    for (int64_t i = 0; i < img.size(); i++) {
        out[i] = std::clamp((img[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    }
    return out;
}

inline uint8_t quantize8(float v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

/// Snaps values onto the 8-bit grid a PNG roundtrip produces.
inline Image quantize_image(const Image& img) {
    Image out(img.shape);
    for (int64_t i = 0; i < img.size(); i++) {
        out[i] = static_cast<float>(quantize8(img[i])) / 255.0f;
    }
    return out;
}

namespace detail {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image& img) {
    check_image(img, "write_png");
    const int64_t H = img.shape[1], W = img.shape[2];
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) {
        throw IoError("cannot open for writing: " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed for " + path.string());
    }
    std::vector<uint8_t> rows(static_cast<size_t>(H * W * 3));
    for (int64_t y = 0; y < H; y++) {
        for (int64_t x = 0; x < W; x++) {
            for (int64_t c = 0; c < 3; c++) {
                rows[static_cast<size_t>((y * W + x) * 3 + c)] = quantize8(pixel(img, c, y, x));
            }
        }
    }
    std::vector<png_bytep> row_ptrs(static_cast<size_t>(H));
    for (int64_t y = 0; y < H; y++) {
        row_ptrs[static_cast<size_t>(y)] = rows.data() + y * W * 3;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encode failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads any 8/16-bit PNG and converts it to RGB in [0, 1].
inline Image read_png(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) {
        throw IoError("cannot open image: " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed for " + path.string());
    }
    std::vector<uint8_t> rows;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("PNG decode failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const auto W = static_cast<int64_t>(png_get_image_width(png, info));
    const auto H = static_cast<int64_t>(png_get_image_height(png, info));
    const auto rowbytes = static_cast<int64_t>(png_get_rowbytes(png, info));
    rows.resize(static_cast<size_t>(rowbytes * H));
    row_ptrs.resize(static_cast<size_t>(H));
    for (int64_t y = 0; y < H; y++) {
        row_ptrs[static_cast<size_t>(y)] = rows.data() + y * rowbytes;
    }
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    if (rowbytes != W * 3) {
        throw IoError("unsupported PNG layout: " + path.string());
    }
    Image img = make_image(H, W);
    for (int64_t y = 0; y < H; y++) {
        for (int64_t x = 0; x < W; x++) {
            for (int64_t c = 0; c < 3; c++) {
                pixel(img, c, y, x) = static_cast<float>(rows[static_cast<size_t>(y * rowbytes + x * 3 + c)]) / 255.0f;
            }
        }
    }
    return img;
}

/// Lays out a grid of equally sized images with a one-pixel gray gutter. Empty slots stay gray.
inline Image tile_images(const std::vector<std::vector<Image>>& grid) {
    int64_t H = 0, W = 0;
    size_t cols = 0;
    for (auto& row : grid) {
        cols = std::max(cols, row.size());
        for (auto& im : row) {
            H = std::max(H, image_height(im));
            W = std::max(W, image_width(im));
        }
    }
    const int64_t gut = 1;
    const auto R      = static_cast<int64_t>(grid.size());
    const auto C      = static_cast<int64_t>(cols);
    Image sheet       = make_image(std::max<int64_t>(1, R * (H + gut) + gut), std::max<int64_t>(1, C * (W + gut) + gut), 0.5f);
    for (int64_t r = 0; r < R; r++) {
        for (size_t c = 0; c < grid[static_cast<size_t>(r)].size(); c++) {
            const Image& im = grid[static_cast<size_t>(r)][c];
            for (int64_t y = 0; y < image_height(im); y++) {
                for (int64_t x = 0; x < image_width(im); x++) {
                    for (int64_t ch = 0; ch < 3; ch++) {
                        pixel(sheet, ch, gut + r * (H + gut) + y, gut + static_cast<int64_t>(c) * (W + gut) + x) =
                            pixel(im, ch, y, x);
                    }
                }
            }
        }
    }
    return sheet;
}

}  // namespace icl
