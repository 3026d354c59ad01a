#pragma once

// RGB images in [0,1], resampling, and PNG/PPM/PGM I/O.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylecal {

/// Three-channel image, interleaved RGB, row-major, values nominally in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, fill) {}

    static constexpr int channels = 3;

    double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    size_t size() const { return data.size(); }

    bool operator==(const Image&) const = default;
};

inline void validate_image(const Image& img) {
    if (img.height < 8 || img.width < 8)
        throw std::invalid_argument("image must be at least 8x8, got " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width));
    if (img.data.size() != static_cast<size_t>(img.height) * img.width * 3)
        throw std::invalid_argument("image data size does not match dimensions");
    for (double v : img.data)
        if (!std::isfinite(v)) throw std::invalid_argument("image contains non-finite values");
}

inline Image clamp01(Image img) {
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

/// Seeded Gaussian noise image, clamped to [0,1].
inline Image noise_image(int h, int w, std::uint64_t seed, double mean = 0.5, double stddev = 0.1) {
    Image img(h, w);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : img.data) v = std::clamp(dist(rng), 0.0, 1.0);
    return img;
}

namespace detail {

// Separable triangle-filter weights; the support widens when shrinking so
// downsampling averages instead of aliasing.
struct ResampleTap {
    int first = 0;
    std::vector<double> weights;
};

inline std::vector<ResampleTap> resample_taps(int src, int dst) {
    std::vector<ResampleTap> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    const double support = std::max(1.0, scale);
    for (int i = 0; i < dst; ++i) {
        const double center = (i + 0.5) * scale;
        int lo = static_cast<int>(std::floor(center - support));
        int hi = static_cast<int>(std::ceil(center + support));
        lo = std::max(lo, 0);
        hi = std::min(hi, src);
        ResampleTap& t = taps[i];
        t.first = lo;
        double total = 0.0;
        for (int j = lo; j < hi; ++j) {
            const double d = std::abs((j + 0.5) - center) / support;
            const double w = std::max(0.0, 1.0 - d);
            t.weights.push_back(w);
            total += w;
        }
        if (total <= 0.0) {
            t.first = std::clamp(static_cast<int>(center), 0, src - 1);
            t.weights.assign(1, 1.0);
            total = 1.0;
        }
        for (double& w : t.weights) w /= total;
    }
    return taps;
}

}  // namespace detail

/// Resample to (h, w). Identity when the size is unchanged.
inline Image resize(const Image& src, int h, int w) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("resize target must be positive");
    if (src.height == h && src.width == w) return src;
    const auto tx = detail::resample_taps(src.width, w);
    const auto ty = detail::resample_taps(src.height, h);
    Image tmp(src.height, w);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (size_t k = 0; k < tx[x].weights.size(); ++k) acc += tx[x].weights[k] * src.at(y, tx[x].first + static_cast<int>(k), c);
                tmp.at(y, x, c) = acc;
            }
    Image out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (size_t k = 0; k < ty[y].weights.size(); ++k) acc += ty[y].weights[k] * tmp.at(ty[y].first + static_cast<int>(k), x, c);
                out.at(y, x, c) = acc;
            }
    return out;
}

/// Working size for a target width: aspect preserved, height rounded to a
/// multiple of `multiple` so every pooling stage divides evenly.
inline std::pair<int, int> working_size(int src_h, int src_w, int target_w, int multiple = 16) {
    const double h = static_cast<double>(src_h) * target_w / src_w;
    int rounded = static_cast<int>(std::lround(h / multiple)) * multiple;
    return {std::max(rounded, multiple), target_w};
}

inline Image resize_to_width(const Image& src, int target_w, int multiple = 16) {
    auto [h, w] = working_size(src.height, src.width, target_w, multiple);
    return resize(src, h, w);
}

// ---------------------------------------------------------------------------
// File I/O

namespace detail {

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Reads the whitespace/comment separated header of a netpbm file.
inline std::vector<int> netpbm_header(const std::string& bytes, size_t& pos, int count) {
    std::vector<int> vals;
    while (static_cast<int>(vals.size()) < count) {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw std::runtime_error("malformed netpbm header");
        vals.push_back(std::stoi(bytes.substr(start, pos - start)));
    }
    return vals;
}

struct PngReadGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct PngWriteGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteGuard() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};

}  // namespace detail

inline Image read_ppm(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '3'))
        throw std::runtime_error(path + ": not a PPM file");
    size_t pos = 2;
    auto hdr = detail::netpbm_header(bytes, pos, 3);
    const int w = hdr[0], h = hdr[1], maxval = hdr[2];
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw std::runtime_error(path + ": unsupported PPM header");
    Image img(h, w);
    if (bytes[1] == '6') {
        ++pos;
        if (bytes.size() - pos < img.size()) throw std::runtime_error(path + ": truncated PPM");
        for (size_t i = 0; i < img.size(); ++i)
            img.data[i] = static_cast<unsigned char>(bytes[pos + i]) / static_cast<double>(maxval);
    } else {
        auto vals = detail::netpbm_header(bytes, pos, static_cast<int>(img.size()));
        for (size_t i = 0; i < img.size(); ++i) img.data[i] = vals[i] / static_cast<double>(maxval);
    }
    return img;
}

inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (double v : img.data) out.put(static_cast<char>(detail::to_byte(v)));
}

inline Image read_png(const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open " + path);
    detail::PngReadGuard g;
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!g.png) throw std::runtime_error("png_create_read_struct failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw std::runtime_error("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(g.png))) throw std::runtime_error(path + ": PNG decode error");
    png_init_io(g.png, fp.get());
    png_read_info(g.png, g.info);
    png_set_strip_16(g.png);
    png_set_strip_alpha(g.png);
    png_set_packing(g.png);
    png_set_palette_to_rgb(g.png);
    png_set_expand_gray_1_2_4_to_8(g.png);
    png_set_gray_to_rgb(g.png);
    png_read_update_info(g.png, g.info);
    const int w = static_cast<int>(png_get_image_width(g.png, g.info));
    const int h = static_cast<int>(png_get_image_height(g.png, g.info));
    const size_t rowbytes = png_get_rowbytes(g.png, g.info);
    std::vector<png_byte> buf(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
    png_read_image(g.png, rows.data());
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rows[y][x * 3 + c] / 255.0;
    return img;
}

inline void write_png(const Image& img, const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write " + path);
    detail::PngWriteGuard g;
    g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!g.png) throw std::runtime_error("png_create_write_struct failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw std::runtime_error("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(g.png))) throw std::runtime_error(path + ": PNG encode error");
    png_init_io(g.png, fp.get());
    png_set_IHDR(g.png, g.info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(g.png, g.info);
    std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[x * 3 + c] = detail::to_byte(img.at(y, x, c));
        png_write_row(g.png, row.data());
    }
    png_write_end(g.png, nullptr);
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
    if (s.size() < suffix.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                      [](char a, char b) { return std::tolower(static_cast<unsigned char>(a)) == b; });
}

/// Reads PNG or PPM by extension.
inline Image read_image(const std::string& path) {
    if (has_suffix(path, ".png")) return read_png(path);
    if (has_suffix(path, ".ppm")) return read_ppm(path);
    throw std::runtime_error(path + ": unsupported image extension (expected .png or .ppm)");
}

inline void write_image(const Image& img, const std::string& path) {
    if (has_suffix(path, ".ppm")) return write_ppm(img, path);
    write_png(img, path);
}

/// Single-channel binary mask (0/1) used for contour ground truth.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    size_t count() const { return static_cast<size_t>(std::count(data.begin(), data.end(), std::uint8_t{1})); }

    bool operator==(const Mask&) const = default;
};

/// PGM (P5 or P2); any nonzero sample is a boundary pixel.
inline Mask read_pgm_mask(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '2'))
        throw std::runtime_error(path + ": not a PGM file");
    size_t pos = 2;
    auto hdr = detail::netpbm_header(bytes, pos, 3);
    const int w = hdr[0], h = hdr[1], maxval = hdr[2];
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw std::runtime_error(path + ": unsupported PGM header");
    Mask m(h, w);
    if (bytes[1] == '5') {
        ++pos;
        if (bytes.size() - pos < m.data.size()) throw std::runtime_error(path + ": truncated PGM");
        for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = bytes[pos + i] != 0 ? 1 : 0;
    } else {
        auto vals = detail::netpbm_header(bytes, pos, static_cast<int>(m.data.size()));
        for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = vals[i] != 0 ? 1 : 0;
    }
    return m;
}

inline void write_pgm_mask(const Mask& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "P5\n" << m.width << " " << m.height << "\n255\n";
    for (auto v : m.data) out.put(static_cast<char>(v ? 255 : 0));
}

}  // namespace stylecal
