#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

// 8-bit RGB image in row-major HWC layout.
struct ImageU8 {
    int width = 0, height = 0;
    std::vector<unsigned char> pixels;  // height*width*3

    unsigned char& at(int y, int x, int c) { return pixels[(size_t)((y * width + x) * 3 + c)]; }
    unsigned char at(int y, int x, int c) const { return pixels[(size_t)((y * width + x) * 3 + c)]; }
};

inline void write_png_rgb(const std::string& path, const ImageU8& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) fail("io", "cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        fail("io", "png write failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, (png_uint_32)img.width, (png_uint_32)img.height, 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows((size_t)img.height);
    for (int y = 0; y < img.height; y++)
        rows[(size_t)y] = (png_bytep)(img.pixels.data() + (size_t)y * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline ImageU8 read_png_rgb(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) fail("io", "cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        fail("io", "png read failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    // normalize any input to 8-bit RGB
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    ImageU8 img;
    img.width = (int)png_get_image_width(png, info);
    img.height = (int)png_get_image_height(png, info);
    img.pixels.resize((size_t)img.width * img.height * 3);
    std::vector<png_bytep> rows((size_t)img.height);
    for (int y = 0; y < img.height; y++)
        rows[(size_t)y] = img.pixels.data() + (size_t)y * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// [3,H,W] float in [-1,1]  <->  8-bit RGB
inline Tensor to_float_chw(const ImageU8& img) {
    Tensor t({3, img.height, img.width});
    for (int c = 0; c < 3; c++)
        for (int y = 0; y < img.height; y++)
            for (int x = 0; x < img.width; x++)
                t.at3(c, y, x) = (float)img.at(y, x, c) / 127.5f - 1.f;
    return t;
}

inline ImageU8 to_u8_rgb(const Tensor& t) {
    if (t.rank() != 3 || t.shape[0] != 3)
        fail("io", "expected a [3,H,W] tensor, got " + shape_str(t.shape));
    ImageU8 img;
    img.height = t.shape[1];
    img.width = t.shape[2];
    img.pixels.resize((size_t)img.width * img.height * 3);
    for (int c = 0; c < 3; c++)
        for (int y = 0; y < img.height; y++)
            for (int x = 0; x < img.width; x++) {
                float v = std::min(1.f, std::max(-1.f, t.at3(c, y, x)));
                img.at(y, x, c) = (unsigned char)std::lround(((double)v + 1.0) * 127.5);
            }
    return img;
}

inline ImageU8 gray_to_u8(const Tensor& t) {
    if (t.rank() != 2) fail("io", "expected a [H,W] tensor, got " + shape_str(t.shape));
    ImageU8 img;
    img.height = t.shape[0];
    img.width = t.shape[1];
    img.pixels.resize((size_t)img.width * img.height * 3);
    for (int y = 0; y < img.height; y++)
        for (int x = 0; x < img.width; x++) {
            float v = std::min(1.f, std::max(0.f, t.at2(y, x)));
            unsigned char g = (unsigned char)std::lround((double)v * 255.0);
            for (int c = 0; c < 3; c++) img.at(y, x, c) = g;
        }
    return img;
}

}  // namespace cdiff
