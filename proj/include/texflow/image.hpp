// ============================================================================
// image.hpp - intensity image type, rectangle geometry, binary PGM/PPM I/O
// ============================================================================

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "texflow/common.hpp"

namespace texflow {

// Row-major H x W x C grid of intensities in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c = 1, double fill = 0.0)
        : height(h), width(w), channels(c), data(std::size_t(h) * w * c, fill) {}

    double& at(int y, int x, int c = 0) {
        return data[(std::size_t(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c = 0) const {
        return data[(std::size_t(y) * width + x) * channels + c];
    }

    std::size_t pixel_count() const { return std::size_t(height) * width; }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

struct Rect {
    int x0 = 0;
    int y0 = 0;
    int w = 0;
    int h = 0;

    bool inside(int image_h, int image_w) const {
        return w >= 1 && h >= 1 && x0 >= 0 && y0 >= 0 && x0 + w <= image_w &&
               y0 + h <= image_h;
    }
    bool operator==(const Rect& o) const {
        return x0 == o.x0 && y0 == o.y0 && w == o.w && h == o.h;
    }
};

inline void validate(const Image& img, const char* what = "image") {
    if (img.height < 1 || img.width < 1 || (img.channels != 1 && img.channels != 3))
        throw ParameterError(std::string(what) + ": bad dimensions");
    if (img.data.size() != std::size_t(img.height) * img.width * img.channels)
        throw ParameterError(std::string(what) + ": data length does not match dimensions");
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// ----------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6), maxval 255. Intensities map linearly
// [0,255] <-> [0,1]; round-trips are lossless at 8-bit quantization.
// ----------------------------------------------------------------------------

namespace detail {

// Whitespace/comment-skipping integer scanner that tracks the byte offset for
// format diagnostics.
struct PnmScanner {
    const std::string& buf;
    std::size_t pos = 0;

    explicit PnmScanner(const std::string& b) : buf(b) {}

    void skip_space_and_comments() {
        while (pos < buf.size()) {
            const char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    int next_int(const char* what) {
        skip_space_and_comments();
        if (pos >= buf.size())
            throw FormatError(std::string("unexpected end of header, expected ") + what, pos);
        if (buf[pos] < '0' || buf[pos] > '9')
            throw FormatError(std::string("expected integer for ") + what, pos);
        long v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1'000'000) throw FormatError(std::string(what) + " out of range", pos);
            ++pos;
        }
        return int(v);
    }
};

}  // namespace detail

inline Image decode_pnm(const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("not a binary PGM/PPM file (expected P5 or P6)", 0);
    const int channels = bytes[1] == '5' ? 1 : 3;
    detail::PnmScanner sc(bytes);
    sc.pos = 2;
    const int width = sc.next_int("width");
    const int height = sc.next_int("height");
    const int maxval = sc.next_int("maxval");
    if (width < 1 || height < 1)
        throw FormatError("non-positive image dimensions", sc.pos);
    if (maxval != 255) throw FormatError("unsupported maxval (only 255)", sc.pos);
    if (sc.pos >= bytes.size())
        throw FormatError("missing payload after header", sc.pos);
    const char sep = bytes[sc.pos];
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
        throw FormatError("expected single whitespace byte before payload", sc.pos);
    ++sc.pos;

    const std::size_t need = std::size_t(height) * width * channels;
    if (bytes.size() - sc.pos < need)
        throw FormatError("truncated payload (have " +
                              std::to_string(bytes.size() - sc.pos) + " bytes, need " +
                              std::to_string(need) + ")",
                          bytes.size());
    Image img(height, width, channels);
    for (std::size_t i = 0; i < need; ++i)
        img.data[i] = double(std::uint8_t(bytes[sc.pos + i])) / 255.0;
    return img;
}

inline std::string encode_pnm(const Image& img) {
    validate(img);
    std::string out = img.channels == 1 ? "P5" : "P6";
    out += "\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.data.size());
    for (double v : img.data) {
        const int q = int(std::lround(clamp01(v) * 255.0));
        out.push_back(char(std::uint8_t(q)));
    }
    return out;
}

inline Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParameterError("cannot open image file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pnm(bytes);
}

inline void save_image(const Image& img, const std::string& path) {
    const std::string bytes = encode_pnm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParameterError("cannot write image file: " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw ParameterError("short write to image file: " + path);
}

}  // namespace texflow
