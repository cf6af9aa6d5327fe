#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "msvit/checkpoint.hpp"  // IoError
#include "msvit/tensor.hpp"

namespace msvit {

// Channel-planar float image, pixel values in [0,1]. channels is 1 (OCT,
// PGM) or 3 (fundus, PPM).
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;  // [C,H,W]

    bool empty() const { return pixels.empty(); }

    static Image zeros(std::size_t channels, std::size_t size) {
        Image im;
        im.channels = channels;
        im.height = size;
        im.width = size;
        im.pixels.assign(channels * size * size, 0.0f);
        return im;
    }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

namespace detail {

inline unsigned char quantize(float v) {
    const float scaled = std::round(v * 255.0f);
    return static_cast<unsigned char>(scaled < 0.0f ? 0.0f : (scaled > 255.0f ? 255.0f : scaled));
}

inline int next_header_int(std::istream& is, const std::string& path) {
    // skip whitespace and '#' comments between header tokens
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            c = is.get();
        } else {
            break;
        }
    }
    if (c == EOF) throw IoError("truncated netpbm header: " + path);
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = is.get();
    }
    return value;
}

}  // namespace detail

// binary P5 (1 channel) / P6 (3 channels), maxval 255
inline void write_netpbm(const std::string& path, const Image& im) {
    check(im.channels == 1 || im.channels == 3, "netpbm: image must have 1 or 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open image for writing: " + path);
    os << (im.channels == 1 ? "P5" : "P6") << "\n" << im.width << " " << im.height << "\n255\n";
    std::vector<unsigned char> row(im.width * im.channels);
    for (std::size_t y = 0; y < im.height; ++y) {
        for (std::size_t x = 0; x < im.width; ++x)
            for (std::size_t c = 0; c < im.channels; ++c)
                row[x * im.channels + c] = detail::quantize(im.at(c, y, x));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw IoError("image write failed: " + path);
}

inline Image read_netpbm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) throw IoError("not a binary PGM/PPM file: " + path);
    const std::size_t channels = m1 == '5' ? 1 : 3;
    const std::size_t width = static_cast<std::size_t>(detail::next_header_int(is, path));
    const std::size_t height = static_cast<std::size_t>(detail::next_header_int(is, path));
    const int maxval = detail::next_header_int(is, path);
    if (maxval != 255) throw IoError("unsupported maxval " + std::to_string(maxval) + ": " + path);
    // header ends with the single whitespace byte consumed by next_header_int

    Image im;
    im.channels = channels;
    im.height = height;
    im.width = width;
    im.pixels.resize(channels * height * width);
    std::vector<unsigned char> row(width * channels);
    for (std::size_t y = 0; y < height; ++y) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!is) throw IoError("truncated image data: " + path);
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                im.at(c, y, x) = static_cast<float>(row[x * channels + c]) / 255.0f;
    }
    return im;
}

}  // namespace msvit
