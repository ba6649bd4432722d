#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace due {

// Tiny 8-bit RGB raster, rows top to bottom.
struct ImageRGB {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> px;  // 3 * width * height bytes

    ImageRGB() = default;
    ImageRGB(int w, int h, std::uint8_t r = 0, std::uint8_t g = 0, std::uint8_t b = 0);

    void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        if (x < 0 || y < 0 || x >= width || y >= height) return;
        std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
        px[i] = r;
        px[i + 1] = g;
        px[i + 2] = b;
    }
    // Alpha-blend a color onto the pixel, a in [0,1].
    void blend(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b, double a);
};

// Serialize as an 8-bit truecolor PNG (deflate via zlib, no filtering).
std::vector<std::uint8_t> encode_png(const ImageRGB& img);
void write_png(const std::string& path, const ImageRGB& img);

}  // namespace due
