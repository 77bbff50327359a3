#pragma once

#include <png.h>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dfl/common.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// PNG (8/16-bit gray or RGB) and PFM (32-bit float) I/O. Pixel values map to
// [0, 1] by division with the bit-depth maximum; PFM stores raw floats.
// ---------------------------------------------------------------------------

namespace detail {
struct PngReadCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* f = nullptr;
    ~PngReadCloser() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (f) std::fclose(f);
    }
};
struct PngWriteCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* f = nullptr;
    ~PngWriteCloser() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (f) std::fclose(f);
    }
};
}  // namespace detail

inline Image read_png(const std::string& path) {
    detail::PngReadCloser ctx;
    ctx.f = std::fopen(path.c_str(), "rb");
    if (!ctx.f) throw DataError("cannot open image: " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, ctx.f) != 8 || png_sig_cmp(sig, 0, 8))
        throw DataError("not a PNG file: " + path);
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.png || !ctx.info) throw DataError("libpng init failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw DataError("failed to decode PNG: " + path);
    png_init_io(ctx.png, ctx.f);
    png_set_sig_bytes(ctx.png, 8);
    png_read_info(ctx.png, ctx.info);

    png_set_palette_to_rgb(ctx.png);
    png_set_expand_gray_1_2_4_to_8(ctx.png);
    png_set_strip_alpha(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    const int w = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
    const int h = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
    const int depth = png_get_bit_depth(ctx.png, ctx.info);
    const int channels = png_get_channels(ctx.png, ctx.info);
    if (channels != 1 && channels != 3)
        throw DataError(strf("%s: unsupported channel count %d", path.c_str(), channels));

    const size_t rowbytes = png_get_rowbytes(ctx.png, ctx.info);
    std::vector<unsigned char> data(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = data.data() + rowbytes * y;
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, nullptr);

    Image img(1, channels, h, w);
    const double scale = depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
    for (int y = 0; y < h; ++y) {
        const unsigned char* r = rows[y];
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                double value;
                if (depth == 16) {
                    // PNG stores 16-bit samples big-endian.
                    const size_t i = (static_cast<size_t>(x) * channels + c) * 2;
                    value = static_cast<double>((r[i] << 8) | r[i + 1]);
                } else {
                    value = static_cast<double>(r[static_cast<size_t>(x) * channels + c]);
                }
                img.at(c, y, x) = value * scale;
            }
    }
    return img;
}

/// Writes a PNG; values are clamped to [0,1] and quantized by rounding.
inline void write_png(const std::string& path, const Image& img, int bit_depth = 16) {
    if (bit_depth != 8 && bit_depth != 16) throw ConfigError("write_png: bit depth must be 8 or 16");
    if (img.c != 1 && img.c != 3) throw ShapeError("write_png: 1 or 3 channels required");
    detail::PngWriteCloser ctx;
    ctx.f = std::fopen(path.c_str(), "wb");
    if (!ctx.f) throw DataError("cannot write image: " + path);
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.png || !ctx.info) throw DataError("libpng init failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw DataError("failed to encode PNG: " + path);
    png_init_io(ctx.png, ctx.f);
    png_set_IHDR(ctx.png, ctx.info, img.w, img.h, bit_depth,
                 img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);

    const int maxval = bit_depth == 16 ? 65535 : 255;
    const size_t rowbytes = static_cast<size_t>(img.w) * img.c * (bit_depth / 8);
    std::vector<unsigned char> row(rowbytes);
    for (int y = 0; y < img.h; ++y) {
        size_t i = 0;
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < img.c; ++c) {
                const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                const int q = static_cast<int>(std::lround(v * maxval));
                if (bit_depth == 16) {
                    row[i++] = static_cast<unsigned char>(q >> 8);
                    row[i++] = static_cast<unsigned char>(q & 0xff);
                } else {
                    row[i++] = static_cast<unsigned char>(q);
                }
            }
        png_write_row(ctx.png, row.data());
    }
    png_write_end(ctx.png, nullptr);
}

// ---------------------------------------------------------------------------
// PFM, grayscale ("Pf"), little-endian (negative scale), rows bottom-to-top.
// ---------------------------------------------------------------------------

inline void write_pfm(const std::string& path, const Tensor& grid) {
    if (grid.c != 1) throw ShapeError("write_pfm: single-channel grids only");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write PFM: " + path);
    out << "Pf\n" << grid.w << " " << grid.h << "\n-1.0\n";
    std::vector<float> row(grid.w);
    for (int y = grid.h - 1; y >= 0; --y) {
        const double* r = grid.row(0, y);
        for (int x = 0; x < grid.w; ++x) row[x] = static_cast<float>(r[x]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(sizeof(float) * row.size()));
    }
    if (!out) throw DataError("short write on PFM: " + path);
}

inline Tensor read_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open PFM: " + path);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (magic != "Pf") throw DataError(path + ": only grayscale 'Pf' PFM supported");
    if (w <= 0 || h <= 0) throw DataError(path + ": bad PFM dimensions");
    if (scale >= 0) throw DataError(path + ": big-endian PFM not supported");
    in.get();  // single whitespace after the header
    Tensor grid = Tensor::grid(h, w);
    std::vector<float> row(w);
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(sizeof(float) * row.size()));
        if (!in) throw DataError(path + ": truncated PFM data");
        double* r = grid.row(0, y);
        for (int x = 0; x < w; ++x) r[x] = static_cast<double>(row[x]);
    }
    return grid;
}

/// Converts to luminance with Rec. 601 weights; grayscale images pass through.
inline Tensor luminance(const Image& img) {
    if (img.c == 1) return img;
    Tensor out = Tensor::grid(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            out.at(y, x) = 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) +
                           0.114 * img.at(2, y, x);
    return out;
}

inline Image replicate_gray(const Tensor& gray) {
    Image out(1, 3, gray.h, gray.w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < gray.h; ++y)
            std::memcpy(out.row(c, y), gray.row(0, y), sizeof(double) * gray.w);
    return out;
}

}  // namespace dfl
