// Binary PPM (P6, RGB) and PGM (P5, gray) readers and writers.
#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "emseg/common.hpp"

namespace emseg {

struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 3 for RGB, 1 for gray
    std::vector<uint8_t> pixels;  // row-major, interleaved channels

    uint8_t at(int y, int x, int c = 0) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t& at(int y, int x, int c = 0) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

namespace detail {

inline int read_pnm_token(std::istream& in, const std::string& path) {
    // Skips whitespace and '#' comment lines between header fields.
    while (true) {
        int ch = in.peek();
        if (ch == EOF) throw FormatError(path + ": truncated header");
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
            continue;
        }
        if (std::isspace(ch)) {
            in.get();
            continue;
        }
        break;
    }
    int value = 0;
    if (!(in >> value)) throw FormatError(path + ": malformed header field");
    return value;
}

}  // namespace detail

inline ImageU8 read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path + ": cannot open");
    char magic[2] = {};
    in.read(magic, 2);
    int channels;
    if (magic[0] == 'P' && magic[1] == '6')
        channels = 3;
    else if (magic[0] == 'P' && magic[1] == '5')
        channels = 1;
    else
        throw FormatError(path + ": not a binary PPM/PGM file");

    ImageU8 img;
    img.channels = channels;
    img.width = detail::read_pnm_token(in, path);
    img.height = detail::read_pnm_token(in, path);
    int maxval = detail::read_pnm_token(in, path);
    if (img.width < 1 || img.height < 1) throw FormatError(path + ": bad dimensions");
    if (maxval != 255) throw FormatError(path + ": only maxval 255 supported, got " + std::to_string(maxval));
    in.get();  // single whitespace byte after maxval

    size_t n = static_cast<size_t>(img.width) * img.height * channels;
    img.pixels.resize(n);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) throw FormatError(path + ": truncated pixel data");
    return img;
}

inline void write_image(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw FormatError(path + ": can only write 1- or 3-channel images");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(path + ": cannot open for writing");
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw FormatError(path + ": write failed");
}

}  // namespace emseg
