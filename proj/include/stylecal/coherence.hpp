#pragma once

// Contour coherence: a single-scale oriented-gradient boundary detector and
// max-F evaluation against boundary annotations.

#include <stylecal/image.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylecal::coherence {

inline constexpr int kOrientations = 8;
inline constexpr int kRadius = 3;
inline constexpr int kBins = 16;
inline constexpr int kThresholds = 30;

struct ContourMap {
    int height = 0;
    int width = 0;
    std::vector<double> strength;

    ContourMap() = default;
    ContourMap(int h, int w) : height(h), width(w), strength(static_cast<size_t>(h) * w, 0.0) {}

    double& at(int y, int x) { return strength[static_cast<size_t>(y) * width + x]; }
    double at(int y, int x) const { return strength[static_cast<size_t>(y) * width + x]; }
};

/// One or more boundary annotations of the same size.
struct GroundTruth {
    int height = 0;
    int width = 0;
    std::vector<Mask> annotations;

    GroundTruth() = default;
    explicit GroundTruth(Mask m) : height(m.height), width(m.width) { annotations.push_back(std::move(m)); }

    void validate() const {
        if (annotations.empty()) throw std::invalid_argument("ground truth needs at least one annotation");
        for (const Mask& m : annotations) {
            if (m.height != height || m.width != width)
                throw std::invalid_argument("ground truth annotations differ in size");
            for (auto v : m.data)
                if (v > 1) throw std::invalid_argument("ground truth mask is not binary");
        }
    }
};

namespace detail {

struct Offset {
    int dy, dx;
};

struct HalfDisc {
    std::vector<Offset> plus, minus;
    int ny, nx;  // unit step along the normal, for non-max suppression
};

/// Orientation k has normal angle k*pi/8 measured from +x towards +y. Pixels on
/// the dividing line belong to neither half.
inline const std::array<HalfDisc, kOrientations>& half_discs() {
    static const auto discs = [] {
        std::array<HalfDisc, kOrientations> out;
        for (int k = 0; k < kOrientations; ++k) {
            const double a = k * std::numbers::pi / kOrientations;
            const double c = std::cos(a), s = std::sin(a);
            HalfDisc& h = out[k];
            for (int dy = -kRadius; dy <= kRadius; ++dy)
                for (int dx = -kRadius; dx <= kRadius; ++dx) {
                    if (dx * dx + dy * dy > kRadius * kRadius) continue;
                    const double side = dx * c + dy * s;
                    if (side > 1e-9)
                        h.plus.push_back({dy, dx});
                    else if (side < -1e-9)
                        h.minus.push_back({dy, dx});
                }
            h.nx = static_cast<int>(std::lround(c));
            h.ny = static_cast<int>(std::lround(s));
        }
        return out;
    }();
    return discs;
}

/// Brightness and two opponent channels, each mapped onto [0,1].
inline std::array<std::vector<double>, 3> opponent_channels(const Image& img) {
    const size_t n = static_cast<size_t>(img.height) * img.width;
    std::array<std::vector<double>, 3> ch;
    for (auto& c : ch) c.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const double r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
        ch[0][i] = (r + g + b) / 3.0;
        ch[1][i] = 0.5 * (r - g + 1.0);
        ch[2][i] = 0.5 * ((r + g) / 2.0 - b + 1.0);
    }
    return ch;
}

inline int bin_of(double v) { return std::clamp(static_cast<int>(v * kBins), 0, kBins - 1); }

}  // namespace detail

/// Per-pixel oriented energy before suppression: energy[k][y*w+x] in [0,1].
/// Each value is the chi-square distance between the two half-disc histograms,
/// averaged over the three channels. Borders replicate the edge pixels.
inline std::array<std::vector<double>, kOrientations> oriented_energy(const Image& img) {
    validate_image(img);
    const int H = img.height, W = img.width;
    const auto ch = detail::opponent_channels(img);
    const auto& discs = detail::half_discs();
    std::array<std::vector<double>, kOrientations> energy;
    std::vector<std::array<int, 3>> bins(static_cast<size_t>(H) * W);
    for (size_t i = 0; i < bins.size(); ++i)
        for (int c = 0; c < 3; ++c) bins[i][c] = detail::bin_of(ch[c][i]);

    for (int k = 0; k < kOrientations; ++k) {
        const auto& d = discs[k];
        auto& e = energy[k];
        e.assign(static_cast<size_t>(H) * W, 0.0);
        const double norm = 1.0 / static_cast<double>(d.plus.size());
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                std::array<std::array<int, kBins>, 3> hp{}, hm{};
                auto tally = [&](const std::vector<detail::Offset>& offs, std::array<std::array<int, kBins>, 3>& h) {
                    for (const auto& o : offs) {
                        const int yy = std::clamp(y + o.dy, 0, H - 1), xx = std::clamp(x + o.dx, 0, W - 1);
                        const auto& b = bins[static_cast<size_t>(yy) * W + xx];
                        for (int c = 0; c < 3; ++c) ++h[c][b[c]];
                    }
                };
                tally(d.plus, hp);
                tally(d.minus, hm);
                double total = 0.0;
                for (int c = 0; c < 3; ++c) {
                    double chi = 0.0;
                    for (int b = 0; b < kBins; ++b) {
                        const int s = hp[c][b] + hm[c][b];
                        if (s == 0) continue;
                        const double diff = (hp[c][b] - hm[c][b]) * norm;
                        chi += diff * diff / (s * norm);
                    }
                    total += 0.5 * chi;
                }
                e[static_cast<size_t>(y) * W + x] = total / 3.0;
            }
    }
    return energy;
}

/// Oriented energy, maximum over orientations, thinned by non-max suppression
/// along the winning orientation's normal. A pixel survives when it is strictly
/// above its neighbour behind and at least its neighbour ahead, so a plateau
/// two pixels wide keeps exactly one pixel.
inline ContourMap detect_contours(const Image& img) {
    const auto energy = oriented_energy(img);
    const int H = img.height, W = img.width;
    const auto& discs = detail::half_discs();
    ContourMap mag(H, W);
    std::vector<int> best(static_cast<size_t>(H) * W, 0);
    for (size_t i = 0; i < mag.strength.size(); ++i)
        for (int k = 0; k < kOrientations; ++k)
            if (energy[k][i] > mag.strength[i]) {
                mag.strength[i] = energy[k][i];
                best[i] = k;
            }
    auto value = [&](int y, int x) { return (y < 0 || y >= H || x < 0 || x >= W) ? 0.0 : mag.at(y, x); };
    ContourMap out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double v = mag.at(y, x);
            if (v <= 0.0) continue;
            const auto& d = discs[best[static_cast<size_t>(y) * W + x]];
            if (v > value(y - d.ny, x - d.nx) && v >= value(y + d.ny, x + d.nx)) out.at(y, x) = v;
        }
    return out;
}

inline double default_dmax(int height, int width) { return 0.0075 * std::hypot(height, width); }

inline double threshold(int k) { return static_cast<double>(k) / (kThresholds + 1); }

// ---------------------------------------------------------------------------
// Matching

struct Pixel {
    int y, x;
};

/// Maximum-cardinality matching between predicted and annotated pixels, where
/// a pair may match when its Euclidean distance is at most dmax. Pairs are
/// first taken greedily nearest-first (ties by predicted then annotated scan
/// order); augmenting paths then repair any shortfall of the greedy pass.
inline size_t match_count(const std::vector<Pixel>& pred, const std::vector<Pixel>& gt, int height, int width,
                          double dmax) {
    if (pred.empty() || gt.empty() || dmax < 0.0) return 0;
    std::vector<int> gt_index(static_cast<size_t>(height) * width, -1);
    for (size_t j = 0; j < gt.size(); ++j) gt_index[static_cast<size_t>(gt[j].y) * width + gt[j].x] = static_cast<int>(j);
    const int r = static_cast<int>(std::floor(dmax));
    const double d2max = dmax * dmax;

    struct Edge {
        int d2, p, g;
    };
    std::vector<Edge> edges;
    std::vector<std::vector<int>> adj(pred.size());
    for (size_t i = 0; i < pred.size(); ++i)
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const int d2 = dy * dy + dx * dx;
                if (d2 > d2max) continue;
                const int y = pred[i].y + dy, x = pred[i].x + dx;
                if (y < 0 || y >= height || x < 0 || x >= width) continue;
                const int j = gt_index[static_cast<size_t>(y) * width + x];
                if (j < 0) continue;
                edges.push_back({d2, static_cast<int>(i), j});
                adj[i].push_back(j);
            }
    std::sort(edges.begin(), edges.end(),
              [](const Edge& a, const Edge& b) { return std::tie(a.d2, a.p, a.g) < std::tie(b.d2, b.p, b.g); });

    std::vector<int> mate_p(pred.size(), -1), mate_g(gt.size(), -1);
    size_t matched = 0;
    for (const Edge& e : edges)
        if (mate_p[e.p] < 0 && mate_g[e.g] < 0) {
            mate_p[e.p] = e.g;
            mate_g[e.g] = e.p;
            ++matched;
        }

    std::vector<int> seen(gt.size(), -1);
    auto augment = [&](auto&& self, int p, int stamp) -> bool {
        for (int g : adj[p]) {
            if (seen[g] == stamp) continue;
            seen[g] = stamp;
            if (mate_g[g] < 0 || self(self, mate_g[g], stamp)) {
                mate_p[p] = g;
                mate_g[g] = p;
                return true;
            }
        }
        return false;
    };
    for (size_t i = 0; i < pred.size(); ++i)
        if (mate_p[i] < 0 && !adj[i].empty() && augment(augment, static_cast<int>(i), static_cast<int>(i))) ++matched;
    return matched;
}

struct PrecisionRecall {
    double precision = 1.0;
    double recall = 0.0;

    double f_score() const { return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0; }
};

inline std::vector<Pixel> pixels_of(const Mask& m) {
    std::vector<Pixel> px;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) px.push_back({y, x});
    return px;
}

inline Mask binarize(const ContourMap& pb, double t) {
    Mask m(pb.height, pb.width);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = pb.strength[i] >= t ? 1 : 0;
    return m;
}

/// Precision is the mean over annotations of matched/predicted (1 for an empty
/// prediction); recall pools all annotations: total matched / total annotated.
inline PrecisionRecall pr_match(const Mask& pred, const GroundTruth& gt, double dmax) {
    gt.validate();
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("prediction and ground truth differ in size");
    const auto p = pixels_of(pred);
    PrecisionRecall r;
    double prec = 0.0;
    size_t matched = 0, annotated = 0;
    for (const Mask& a : gt.annotations) {
        const auto g = pixels_of(a);
        const size_t m = match_count(p, g, gt.height, gt.width, dmax);
        prec += p.empty() ? 1.0 : static_cast<double>(m) / p.size();
        matched += m;
        annotated += g.size();
    }
    r.precision = prec / gt.annotations.size();
    r.recall = annotated ? static_cast<double>(matched) / annotated : 0.0;
    return r;
}

inline PrecisionRecall pr_match(const ContourMap& pb, const GroundTruth& gt, double t, double dmax) {
    if (pb.height != gt.height || pb.width != gt.width)
        throw std::invalid_argument("contour map and ground truth differ in size");
    return pr_match(binarize(pb, t), gt, dmax);
}

struct CurvePoint {
    double threshold;
    PrecisionRecall pr;
};

inline std::vector<CurvePoint> pr_curve(const ContourMap& pb, const GroundTruth& gt, double dmax) {
    std::vector<CurvePoint> curve;
    for (int k = 1; k <= kThresholds; ++k) curve.push_back({threshold(k), pr_match(pb, gt, threshold(k), dmax)});
    return curve;
}

inline double max_f(const ContourMap& pb, const GroundTruth& gt, double dmax) {
    double best = 0.0;
    for (const auto& c : pr_curve(pb, gt, dmax)) best = std::max(best, c.pr.f_score());
    return best;
}

/// Max F-score of the image's detected contours against the annotations.
/// dmax < 0 selects the default tolerance for the image size.
inline double base_c(const Image& transferred, const GroundTruth& gt, double dmax = -1.0) {
    if (transferred.height != gt.height || transferred.width != gt.width)
        throw std::invalid_argument("image and ground truth differ in size");
    if (dmax < 0.0) dmax = default_dmax(gt.height, gt.width);
    return max_f(detect_contours(transferred), gt, dmax);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// A boundary pixel is one whose label differs from its right or lower neighbour.
inline Mask boundary_mask(const std::vector<int>& labels, int height, int width) {
    Mask m(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int l = labels[static_cast<size_t>(y) * width + x];
            const bool right = x + 1 < width && labels[static_cast<size_t>(y) * width + x + 1] != l;
            const bool down = y + 1 < height && labels[static_cast<size_t>(y + 1) * width + x] != l;
            m.at(y, x) = right || down;
        }
    return m;
}

struct Scene {
    Image image;
    std::vector<int> labels;
    GroundTruth gt;
};

/// Flat-shaded star-shaped polygons over a background, with a gentle
/// brightness ramp inside each region. Label 0 is the background.
inline Scene synthetic_scene(int height, int width, std::uint64_t seed, int polygons = 4) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Scene s;
    s.labels.assign(static_cast<size_t>(height) * width, 0);
    const int n_labels = polygons + 1;
    std::vector<std::array<double, 3>> color(n_labels);
    for (auto& c : color)
        for (double& v : c) v = 0.1 + 0.8 * u(rng);

    const double span = std::min(height, width);
    for (int p = 1; p <= polygons; ++p) {
        const double cy = height * (0.15 + 0.7 * u(rng)), cx = width * (0.15 + 0.7 * u(rng));
        const double rad = span * (0.15 + 0.2 * u(rng));
        const int nv = 3 + static_cast<int>(u(rng) * 4);
        std::vector<double> ang(nv);
        for (double& a : ang) a = 2.0 * std::numbers::pi * u(rng);
        std::sort(ang.begin(), ang.end());
        std::vector<std::pair<double, double>> poly;  // (y, x)
        for (double a : ang) {
            const double rr = rad * (0.6 + 0.4 * u(rng));
            poly.emplace_back(cy + rr * std::sin(a), cx + rr * std::cos(a));
        }
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double py = y + 0.5, px = x + 0.5;
                bool inside = false;
                for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
                    const auto [yi, xi] = poly[i];
                    const auto [yj, xj] = poly[j];
                    if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
                }
                if (inside) s.labels[static_cast<size_t>(y) * width + x] = p;
            }
    }

    s.image = Image(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const auto& c = color[s.labels[static_cast<size_t>(y) * width + x]];
            const double ramp = 0.04 * (static_cast<double>(y) / height - 0.5);
            for (int k = 0; k < 3; ++k) s.image.at(y, x, k) = std::clamp(c[k] + ramp, 0.0, 1.0);
        }
    s.gt = GroundTruth(boundary_mask(s.labels, height, width));
    return s;
}

/// Annotation made from a contour map: every pixel at or above the lowest sweep threshold.
inline GroundTruth ground_truth_from(const ContourMap& pb) { return GroundTruth(binarize(pb, threshold(1))); }

// ---------------------------------------------------------------------------
// Files

inline GroundTruth load_ground_truth(const std::vector<std::string>& mask_paths) {
    GroundTruth gt;
    for (const auto& p : mask_paths) {
        Mask m = read_pgm_mask(p);
        if (gt.annotations.empty()) {
            gt.height = m.height;
            gt.width = m.width;
        }
        gt.annotations.push_back(std::move(m));
    }
    gt.validate();
    return gt;
}

/// Manifest: a JSON object mapping each content id to a list of PGM mask
/// paths, relative paths resolved against the manifest's directory.
inline std::map<std::string, GroundTruth> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(path + ": manifest must be an object");
    const auto dir = std::filesystem::path(path).parent_path();
    std::map<std::string, GroundTruth> out;
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::vector<std::string> files;
        for (const auto& f : it.value()) {
            std::filesystem::path p = f.get<std::string>();
            files.push_back((p.is_absolute() ? p : dir / p).string());
        }
        out.emplace(it.key(), load_ground_truth(files));
    }
    return out;
}

/// Writes one mask per annotation next to the manifest and the manifest itself.
inline void save_manifest(const std::map<std::string, GroundTruth>& gts, const std::string& path) {
    const auto dir = std::filesystem::path(path).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, gt] : gts) {
        auto& files = j[id] = nlohmann::json::array();
        for (size_t a = 0; a < gt.annotations.size(); ++a) {
            const std::string name = id + "_gt" + std::to_string(a) + ".pgm";
            write_pgm_mask(gt.annotations[a], (dir / name).string());
            files.push_back(name);
        }
    }
    std::ofstream(path) << j.dump(2) << '\n';
}

}  // namespace stylecal::coherence
