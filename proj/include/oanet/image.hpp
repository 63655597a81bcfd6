#pragma once

// Grayscale image buffer and binary PGM (P5) I/O.
//
// Pixels are double in [0,1], row major, row 0 at the top. Quantisation to
// 8 bits happens only at the file boundary.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "oanet/common.hpp"

namespace oanet {

class Image {
public:
    Image() = default;
    Image(int height, int width, double fill = 0.0)
        : h_(height), w_(width), p_(static_cast<size_t>(height) * width, fill) {}

    int height() const { return h_; }
    int width() const { return w_; }
    size_t size() const { return p_.size(); }

    double& at(int y, int x) { return p_[static_cast<size_t>(y) * w_ + x]; }
    double at(int y, int x) const { return p_[static_cast<size_t>(y) * w_ + x]; }

    double* row(int y) { return p_.data() + static_cast<size_t>(y) * w_; }
    const double* row(int y) const { return p_.data() + static_cast<size_t>(y) * w_; }

    const std::vector<double>& pixels() const { return p_; }
    std::vector<double>& pixels() { return p_; }

    bool same_shape(const Image& o) const { return h_ == o.h_ && w_ == o.w_; }

    void fill(const Rect& r, double v) {
        for (int y = r.y; y < r.y + r.h; ++y)
            for (int x = r.x; x < r.x + r.w; ++x) at(y, x) = v;
    }

private:
    int h_ = 0;
    int w_ = 0;
    std::vector<double> p_;
};

// Mean of each non-overlapping 2x2 block. Requires even dimensions.
inline Image downsample2(const Image& in) {
    if (in.height() % 2 != 0 || in.width() % 2 != 0)
        throw InputError(strfmt("downsample2: odd image shape %dx%d", in.height(), in.width()));
    Image out(in.height() / 2, in.width() / 2);
    for (int y = 0; y < out.height(); ++y) {
        const double* r0 = in.row(2 * y);
        const double* r1 = in.row(2 * y + 1);
        double* o = out.row(y);
        for (int x = 0; x < out.width(); ++x)
            o[x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
    }
    return out;
}

inline uint8_t quantize8(double v) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("write_pgm: cannot open " + path.string());
    out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
    std::vector<uint8_t> bytes(img.size());
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize8(img.pixels()[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write_pgm: short write to " + path.string());
}

namespace detail {
inline int pgm_token(std::istream& in) {
    // Skips whitespace and '#' comments, then reads one unsigned decimal.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw InputError("read_pgm: malformed header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = in.get();
    }
    return v;
}
}  // namespace detail

inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("read_pgm: cannot open " + path.string());
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5') throw InputError("read_pgm: not a P5 file: " + path.string());
    int w = detail::pgm_token(in);
    int h = detail::pgm_token(in);
    int maxval = detail::pgm_token(in);
    if (maxval != 255) throw InputError("read_pgm: unsupported maxval");
    // Exactly one whitespace byte separates header and payload; pgm_token has
    // already consumed it as the digit terminator.
    std::vector<uint8_t> bytes(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw InputError("read_pgm: truncated payload in " + path.string());
    Image img(h, w);
    for (size_t i = 0; i < bytes.size(); ++i) img.pixels()[i] = bytes[i] / 255.0;
    return img;
}

}  // namespace oanet
