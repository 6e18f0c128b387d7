#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dome/io.hpp"
#include "dome/occupancy.hpp"

namespace dome {

struct Image {
    int width = 0, height = 0;
    std::vector<uint8_t> rgb;  // 3 bytes per pixel, row-major
};

using Palette = std::vector<std::array<uint8_t, 3>>;

// Fixed colors for the 6-class synthetic table, golden-angle hues otherwise.
inline Palette default_palette(const SemanticClassTable& table) {
    Palette pal(static_cast<size_t>(table.num_classes));
    if (table.num_classes == 6) {
        pal[0] = {240, 240, 240};  // empty
        pal[1] = {95, 95, 100};    // road
        pal[2] = {175, 170, 160};  // sidewalk
        pal[3] = {220, 60, 60};    // car
        pal[4] = {70, 110, 180};   // manmade
        pal[5] = {60, 160, 70};    // vegetation
        return pal;
    }
    for (int c = 0; c < table.num_classes; ++c) {
        if (c == table.empty_id) {
            pal[static_cast<size_t>(c)] = {240, 240, 240};
            continue;
        }
        const double hue = std::fmod(0.61803398875 * c, 1.0) * 6.0;
        const int i = static_cast<int>(hue);
        const double f = hue - i;
        const auto b = [](double v) { return static_cast<uint8_t>(60 + 180 * v); };
        switch (i % 6) {
            case 0: pal[static_cast<size_t>(c)] = {b(1), b(f), b(0)}; break;
            case 1: pal[static_cast<size_t>(c)] = {b(1 - f), b(1), b(0)}; break;
            case 2: pal[static_cast<size_t>(c)] = {b(0), b(1), b(f)}; break;
            case 3: pal[static_cast<size_t>(c)] = {b(0), b(1 - f), b(1)}; break;
            case 4: pal[static_cast<size_t>(c)] = {b(f), b(0), b(1)}; break;
            default: pal[static_cast<size_t>(c)] = {b(1), b(0), b(1 - f)}; break;
        }
    }
    return pal;
}

// Top-down view: each (i, j) column shows its highest non-empty voxel.
// Pixel row = grid i (x axis), column = grid j (y axis).
inline Image render_bev(const OccupancyGrid& grid, const SemanticClassTable& table,
                        const Palette& palette) {
    if (static_cast<int>(palette.size()) < table.num_classes)
        throw std::invalid_argument("render_bev: palette smaller than class count");
    Image img;
    img.width = grid.w();
    img.height = grid.h();
    img.rgb.assign(static_cast<size_t>(img.width) * img.height * 3, 0);
    for (int i = 0; i < grid.h(); ++i)
        for (int j = 0; j < grid.w(); ++j) {
            int label = table.empty_id;
            for (int k = grid.d() - 1; k >= 0; --k) {
                const uint8_t v = grid.at(i, j, k);
                if (v != table.empty_id) {
                    label = v;
                    break;
                }
            }
            const auto& c = palette[static_cast<size_t>(label)];
            uint8_t* px = img.rgb.data() + (static_cast<size_t>(i) * img.width + j) * 3;
            px[0] = c[0];
            px[1] = c[1];
            px[2] = c[2];
        }
    return img;
}

inline std::string render_bev_ascii(const OccupancyGrid& grid, const SemanticClassTable& table) {
    static const char* kGlyphs = ".#+*@%&=o^~xzsqv";
    std::string out;
    out.reserve(static_cast<size_t>(grid.h()) * (static_cast<size_t>(grid.w()) + 1));
    for (int i = grid.h() - 1; i >= 0; --i) {
        for (int j = 0; j < grid.w(); ++j) {
            int label = table.empty_id;
            for (int k = grid.d() - 1; k >= 0; --k) {
                const uint8_t v = grid.at(i, j, k);
                if (v != table.empty_id) {
                    label = v;
                    break;
                }
            }
            out += label == table.empty_id ? '.' : kGlyphs[1 + (label % 15)];
        }
        out += '\n';
    }
    return out;
}

namespace detail {

inline void png_chunk(std::ostream& os, const char type[4], const std::vector<uint8_t>& data) {
    const auto be32 = [&](uint32_t v) {
        const uint8_t b[4] = {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                              static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    be32(static_cast<uint32_t>(data.size()));
    os.write(type, 4);
    if (!data.empty())
        os.write(reinterpret_cast<const char*>(data.data()),
                 static_cast<std::streamsize>(data.size()));
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
    be32(static_cast<uint32_t>(crc));
}

}  // namespace detail

// Truecolor 8-bit PNG, single IDAT, filter 0 on every scanline.
inline void write_png(const std::string& path, const Image& img) {
    if (img.width < 1 || img.height < 1 ||
        img.rgb.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw std::invalid_argument("write_png: bad image buffer");
    auto os = open_out(path);
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr(13);
    const auto put32 = [&](size_t at, uint32_t v) {
        ihdr[at] = static_cast<uint8_t>(v >> 24);
        ihdr[at + 1] = static_cast<uint8_t>(v >> 16);
        ihdr[at + 2] = static_cast<uint8_t>(v >> 8);
        ihdr[at + 3] = static_cast<uint8_t>(v);
    };
    put32(0, static_cast<uint32_t>(img.width));
    put32(4, static_cast<uint32_t>(img.height));
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // truecolor
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    detail::png_chunk(os, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.height) * (static_cast<size_t>(img.width) * 3 + 1));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        const uint8_t* row = img.rgb.data() + static_cast<size_t>(y) * img.width * 3;
        raw.insert(raw.end(), row, row + static_cast<size_t>(img.width) * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> packed(bound);
    if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  Z_BEST_SPEED) != Z_OK)
        throw std::runtime_error("write_png: deflate failed");
    packed.resize(bound);
    detail::png_chunk(os, "IDAT", packed);
    detail::png_chunk(os, "IEND", {});
    if (!os) throw FormatError(FormatErrorCode::OpenFailed, str("writing ", path));
}

}  // namespace dome
