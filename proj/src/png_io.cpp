#include "due/png_io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>

#include "due/common.hpp"

namespace due {

ImageRGB::ImageRGB(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    require(w > 0 && h > 0, ErrorKind::validation, "image dims must be positive");
    width = w;
    height = h;
    px.resize(3 * static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < px.size(); i += 3) {
        px[i] = r;
        px[i + 1] = g;
        px[i + 2] = b;
    }
}

void ImageRGB::blend(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b, double a) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    if (a < 0.0) a = 0.0;
    if (a > 1.0) a = 1.0;
    std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    px[i] = static_cast<std::uint8_t>(px[i] + a * (r - px[i]) + 0.5);
    px[i + 1] = static_cast<std::uint8_t>(px[i + 1] + a * (g - px[i + 1]) + 0.5);
    px[i + 2] = static_cast<std::uint8_t>(px[i + 2] + a * (b - px[i + 2]) + 0.5);
}

namespace {

void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::uint8_t* data, std::size_t len) {
    put_u32be(out, static_cast<std::uint32_t>(len));
    std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len) out.insert(out.end(), data, data + len);
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, out.data() + start, static_cast<uInt>(4 + len)));
    put_u32be(out, crc);
}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageRGB& img) {
    require(img.width > 0 && img.height > 0, ErrorKind::validation, "image dims must be positive");
    require(img.px.size() == 3 * static_cast<std::size_t>(img.width) * img.height,
            ErrorKind::validation, "pixel buffer does not match image dims");

    // Raw stream: each scanline prefixed with filter byte 0.
    std::size_t stride = 3 * static_cast<std::size_t>(img.width);
    std::vector<std::uint8_t> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
        row[0] = 0;
        std::memcpy(row + 1, img.px.data() + static_cast<std::size_t>(y) * stride, stride);
    }

    uLongf zcap = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zdata(zcap);
    int zrc = compress2(zdata.data(), &zcap, raw.data(), static_cast<uLong>(raw.size()), 6);
    require(zrc == Z_OK, ErrorKind::io, "png deflate failed");
    zdata.resize(zcap);

    std::vector<std::uint8_t> out;
    out.reserve(zdata.size() + 128);
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    out.insert(out.end(), sig, sig + 8);

    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<std::uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<std::uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<std::uint8_t>(img.width);
    ihdr[4] = static_cast<std::uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<std::uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<std::uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<std::uint8_t>(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // truecolor
    ihdr[10] = 0;  // deflate
    ihdr[11] = 0;  // adaptive filtering (we emit filter 0 per line)
    ihdr[12] = 0;  // no interlace
    put_chunk(out, "IHDR", ihdr, sizeof ihdr);
    put_chunk(out, "IDAT", zdata.data(), zdata.size());
    put_chunk(out, "IEND", nullptr, 0);
    return out;
}

void write_png(const std::string& path, const ImageRGB& img) {
    std::vector<std::uint8_t> bytes = encode_png(img);
    std::FILE* f = std::fopen(path.c_str(), "wb");
    require(f != nullptr, ErrorKind::io, "cannot open for writing: " + path);
    std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    require(n == bytes.size(), ErrorKind::io, "short write: " + path);
}

}  // namespace due
