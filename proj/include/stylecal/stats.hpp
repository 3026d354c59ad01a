#pragma once

// Feature summary statistics, the PCA projection basis and the base E
// statistic (negative log KL between projected Gaussian summaries).

#include <stylecal/nncore.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylecal::stats {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using nn::FeatureMap;

/// Channels x positions view of a feature map.
inline Eigen::Map<const RowMatrix> as_matrix(const FeatureMap& fm) {
    return {fm.data.data(), fm.channels, fm.positions()};
}
inline Eigen::Map<RowMatrix> as_matrix(FeatureMap& fm) { return {fm.data.data(), fm.channels, fm.positions()}; }

inline void require_finite(const FeatureMap& fm) {
    for (double v : fm.data)
        if (!std::isfinite(v)) throw std::invalid_argument("feature map '" + fm.tap + "' has non-finite values");
}

/// G_ij = sum_p f_ip f_jp.
inline Matrix gram(const FeatureMap& fm) {
    const auto F = as_matrix(fm);
    Matrix G = F * F.transpose();
    return G;
}

/// Throws unless `coarse` can be nearest-neighbour upsampled onto `fine` by integer ratios.
inline void require_integer_ratio(const FeatureMap& fine, const FeatureMap& coarse) {
    if (coarse.height > fine.height || coarse.width > fine.width || coarse.height == 0 || coarse.width == 0 ||
        fine.height % coarse.height != 0 || fine.width % coarse.width != 0)
        throw std::invalid_argument("cannot map " + std::to_string(coarse.height) + "x" + std::to_string(coarse.width) +
                                    " onto " + std::to_string(fine.height) + "x" + std::to_string(fine.width) +
                                    " by integer nearest-neighbour replication");
}

/// G^{l,m}_ij = sum_p f^l_ip (up f^m)_jp with `coarse` upsampled onto `fine`.
inline Matrix cross_gram(const FeatureMap& fine, const FeatureMap& coarse) {
    require_integer_ratio(fine, coarse);
    const FeatureMap up = nn::upsample(coarse, fine.height, fine.width);
    return as_matrix(fine) * as_matrix(up).transpose();
}

inline Vector channel_mean(const FeatureMap& fm) {
    if (fm.positions() == 0) throw std::invalid_argument("empty feature map");
    return as_matrix(fm).rowwise().mean();
}

/// Copy with each channel's spatial mean removed.
inline FeatureMap centered(const FeatureMap& fm) {
    FeatureMap out = fm;
    const Vector mu = channel_mean(fm);
    as_matrix(out).colwise() -= mu;
    return out;
}

struct MeanCov {
    Vector mean;
    Matrix cov;
};

/// Channel means and the (unnormalised) scatter matrix sum_p (f_p - mean)(f_p - mean)^T.
inline MeanCov covariance(const FeatureMap& fm) {
    if (fm.positions() < 2) throw std::invalid_argument("covariance needs at least two positions");
    MeanCov r;
    r.mean = channel_mean(fm);
    const FeatureMap c = centered(fm);
    const auto Fc = as_matrix(c);
    r.cov = Fc * Fc.transpose();
    return r;
}

/// Cross-layer covariance: both maps mean-centred (coarse before upsampling), then cross_gram.
inline Matrix cross_covariance(const FeatureMap& fine, const FeatureMap& coarse) {
    require_integer_ratio(fine, coarse);
    return cross_gram(centered(fine), centered(coarse));
}

struct LayerSummary {
    std::string tap;
    Matrix gram;
    Vector mean;
    Matrix cov;
};

inline LayerSummary summarize(const FeatureMap& fm) {
    auto mc = covariance(fm);
    return {fm.tap, gram(fm), std::move(mc.mean), std::move(mc.cov)};
}

struct CrossSummary {
    std::string fine_tap;
    std::string coarse_tap;
    Matrix gram;
    Matrix cov;
};

inline CrossSummary summarize_cross(const FeatureMap& fine, const FeatureMap& coarse) {
    return {fine.tap, coarse.tap, cross_gram(fine, coarse), cross_covariance(fine, coarse)};
}

// ---------------------------------------------------------------------------
// Projection basis

struct TapBasis {
    std::string tap;
    int channels = 0;
    int t = 0;
    Matrix P;            // channels x t, orthonormal columns
    Vector eigenvalues;  // the t kept eigenvalues, descending
};

struct ProjectionBasis {
    std::vector<TapBasis> taps;

    const TapBasis& at(const std::string& name) const {
        for (const auto& b : taps)
            if (b.tap == name) return b;
        throw std::invalid_argument("basis has no tap '" + name + "'");
    }
    std::vector<std::string> tap_names() const {
        std::vector<std::string> names;
        for (const auto& b : taps) names.push_back(b.tap);
        return names;
    }
};

/// Projection dimensions used with full-width VGG.
inline const std::map<std::string, int> kVggDims = {{"R11", 18}, {"R21", 100}, {"R31", 128}, {"R41", 280}, {"R51", 256}};

/// min(VGG dimension, floor(0.8 C)) per tap, at least 1. When the working
/// image size is given, also at most a quarter of the positions at the tap:
/// a covariance estimated from M positions has rank below M, and KL between
/// such estimates is then set by the regulariser rather than the image.
inline std::map<std::string, int> default_dims(const nn::NetworkSpec& net, const std::vector<std::string>& taps,
                                               int image_height = 0, int image_width = 0) {
    std::map<std::string, int> dims;
    for (const auto& t : taps) {
        const int c = net.channels_at(t);
        int d = static_cast<int>(std::floor(0.8 * c));
        if (auto it = kVggDims.find(t); it != kVggDims.end()) d = std::min(d, it->second);
        if (image_height > 0 && image_width > 0) {
            const auto [h, w] = net.tap_size(t, image_height, image_width);
            d = std::min(d, h * w / 4);
        }
        dims[t] = std::max(d, 1);
    }
    return dims;
}

/// Top-t eigenvectors of a symmetric matrix, descending eigenvalue order.
/// Each column's largest-magnitude entry is made positive (lowest index on ties).
inline TapBasis top_eigenvectors(const Matrix& sym, int t, std::string tap = {}) {
    const int C = static_cast<int>(sym.rows());
    if (t < 1 || t > C) throw std::invalid_argument("projection dimension " + std::to_string(t) + " outside [1, " + std::to_string(C) + "]");
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
    std::vector<int> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return es.eigenvalues()(a) > es.eigenvalues()(b); });
    TapBasis b;
    b.tap = std::move(tap);
    b.channels = C;
    b.t = t;
    b.P.resize(C, t);
    b.eigenvalues.resize(t);
    for (int j = 0; j < t; ++j) {
        Vector v = es.eigenvectors().col(order[j]);
        int arg = 0;
        for (int i = 1; i < C; ++i)
            if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
        if (v(arg) < 0) v = -v;
        b.P.col(j) = v / v.norm();
        b.eigenvalues(j) = es.eigenvalues()(order[j]);
    }
    return b;
}

/// Basis from the element-wise average covariance of a corpus, per tap.
/// Directions whose corpus eigenvalue is at most null_tol times the largest
/// (dead channels) are never kept, so a tap may end up with fewer than the
/// requested columns. Pass null_tol = 0 to keep exactly the requested count.
inline ProjectionBasis build_projection_basis(const std::vector<Image>& corpus, const nn::NetworkSpec& net,
                                              const std::vector<std::string>& taps,
                                              const std::map<std::string, int>& dims, double null_tol = 1e-9) {
    if (corpus.empty()) throw std::invalid_argument("projection basis needs a non-empty corpus");
    std::map<std::string, Matrix> avg;
    for (const Image& img : corpus) {
        const auto maps = nn::forward(img, net, taps);
        for (const auto& t : taps) {
            Matrix cov = covariance(maps.at(t)).cov;
            if (auto it = avg.find(t); it != avg.end())
                it->second += cov;
            else
                avg.emplace(t, std::move(cov));
        }
    }
    ProjectionBasis basis;
    for (const auto& t : taps) {
        Matrix a = avg.at(t) / static_cast<double>(corpus.size());
        if (a.trace() <= 0.0) throw std::invalid_argument("degenerate corpus: zero feature covariance at tap " + t);
        auto it = dims.find(t);
        if (it == dims.end()) throw std::invalid_argument("no projection dimension given for tap " + t);
        if (it->second > a.rows())
            throw std::invalid_argument("projection dimension " + std::to_string(it->second) + " exceeds " +
                                        std::to_string(a.rows()) + " channels at tap " + t);
        int keep = it->second;
        if (null_tol > 0.0) {
            Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
            const Vector& ev = es.eigenvalues();
            const double cut = null_tol * ev.maxCoeff();
            keep = std::min(keep, std::max(1, static_cast<int>((ev.array() > cut).count())));
        }
        basis.taps.push_back(top_eigenvectors(a, keep, t));
    }
    return basis;
}

// ---------------------------------------------------------------------------
// Gaussian summaries and KL

struct GaussianSummary {
    Vector mu;
    Matrix sigma;
};

/// mu = P^T mean, sigma = P^T cov P + eps I with eps = 1e-6 trace/t (floored at 1e-12).
inline GaussianSummary project_summary(const Vector& mean, const Matrix& cov, const Matrix& P) {
    if (mean.size() != P.rows() || cov.rows() != P.rows() || cov.cols() != P.rows())
        throw std::invalid_argument("project_summary: shape mismatch");
    GaussianSummary g;
    g.mu = P.transpose() * mean;
    g.sigma = P.transpose() * cov * P;
    g.sigma = 0.5 * (g.sigma + g.sigma.transpose()).eval();
    const double t = static_cast<double>(P.cols());
    const double eps = std::max(1e-6 * g.sigma.trace() / t, 1e-12);
    g.sigma.diagonal().array() += eps;
    return g;
}

inline GaussianSummary gaussian_summary(const FeatureMap& fm, const TapBasis& basis) {
    auto mc = covariance(fm);
    return project_summary(mc.mean, mc.cov, basis.P);
}

/// D_KL(N0 || N1) via Cholesky factors; no explicit inverse.
inline double gaussian_kl(const GaussianSummary& n0, const GaussianSummary& n1) {
    const Eigen::Index t = n0.mu.size();
    if (n1.mu.size() != t || n0.sigma.rows() != t || n1.sigma.rows() != t)
        throw std::invalid_argument("gaussian_kl: dimension mismatch");
    Eigen::LLT<Matrix> l1(n1.sigma), l0(n0.sigma);
    if (l1.info() != Eigen::Success || l0.info() != Eigen::Success)
        throw std::runtime_error("gaussian_kl: covariance is not positive definite");
    const Matrix L1 = l1.matrixL();
    const Matrix L0 = l0.matrixL();
    const Matrix W = L1.triangularView<Eigen::Lower>().solve(L0);
    const double trace_term = W.squaredNorm();
    const Vector z = L1.triangularView<Eigen::Lower>().solve(n1.mu - n0.mu);
    const double quad = z.squaredNorm();
    const double logdet1 = 2.0 * L1.diagonal().array().log().sum();
    const double logdet0 = 2.0 * L0.diagonal().array().log().sum();
    const double kl = 0.5 * (trace_term + quad - static_cast<double>(t) + logdet1 - logdet0);
    return std::max(kl, 0.0);
}

inline constexpr double kKlFloor = 1e-8;

/// E_i = -ln(max(KL(transferred || style), 1e-8)) at each basis tap, in basis order.
inline std::vector<double> base_e_from_summaries(const std::vector<GaussianSummary>& transferred,
                                                 const std::vector<GaussianSummary>& style) {
    if (transferred.size() != style.size()) throw std::invalid_argument("base_e: tap count mismatch");
    std::vector<double> e(style.size());
    for (size_t i = 0; i < style.size(); ++i)
        e[i] = -std::log(std::max(gaussian_kl(transferred[i], style[i]), kKlFloor));
    return e;
}

inline std::vector<GaussianSummary> image_summaries(const Image& img, const nn::NetworkSpec& net,
                                                    const ProjectionBasis& basis) {
    const auto names = basis.tap_names();
    const auto maps = nn::forward(img, net, names);
    std::vector<GaussianSummary> out;
    for (const auto& b : basis.taps) {
        const FeatureMap& fm = maps.at(b.tap);
        if (fm.channels != b.P.rows())
            throw std::invalid_argument("basis at tap " + b.tap + " has " + std::to_string(b.P.rows()) +
                                        " channels, network gives " + std::to_string(fm.channels));
        out.push_back(gaussian_summary(fm, b));
    }
    return out;
}

inline std::vector<double> base_e(const Image& transferred, const Image& style, const nn::NetworkSpec& net,
                                  const ProjectionBasis& basis) {
    return base_e_from_summaries(image_summaries(transferred, net, basis), image_summaries(style, net, basis));
}

// ---------------------------------------------------------------------------
// ECB1 basis files
//
//   "ECB1" | u32 tap count | per tap: u16 name length, name bytes, u32 C,
//   u32 t, f32 P[C x t] column-major, f64 eigenvalues[t]

inline std::string encode_basis(const ProjectionBasis& basis) {
    nn::detail::ByteWriter w;
    w.bytes("ECB1", 4);
    w.le(static_cast<std::uint32_t>(basis.taps.size()));
    for (const auto& b : basis.taps) {
        w.le(static_cast<std::uint16_t>(b.tap.size()));
        w.bytes(b.tap.data(), b.tap.size());
        w.le(static_cast<std::uint32_t>(b.P.rows()));
        w.le(static_cast<std::uint32_t>(b.P.cols()));
        for (Eigen::Index j = 0; j < b.P.cols(); ++j)
            for (Eigen::Index i = 0; i < b.P.rows(); ++i) w.le(static_cast<float>(b.P(i, j)));
        for (Eigen::Index j = 0; j < b.eigenvalues.size(); ++j) w.le(b.eigenvalues(j));
    }
    return w.str();
}

/// Decodes an ECB1 payload. The f32 columns are re-orthonormalised
/// (P <- P (P^T P)^{-1/2}) so P^T P = I holds to double precision.
inline ProjectionBasis decode_basis(const std::string& bytes) {
    nn::detail::ByteReader r(bytes);
    if (bytes.size() < 4 || r.bytes(4) != "ECB1") throw std::runtime_error("bad magic: not an ECB1 basis file");
    const auto n = r.le<std::uint32_t>();
    ProjectionBasis basis;
    for (std::uint32_t k = 0; k < n; ++k) {
        TapBasis b;
        b.tap = r.bytes(r.le<std::uint16_t>());
        b.channels = static_cast<int>(r.le<std::uint32_t>());
        b.t = static_cast<int>(r.le<std::uint32_t>());
        if (b.t < 1 || b.t > b.channels) throw std::runtime_error("basis tap " + b.tap + ": t outside [1, C]");
        r.need(static_cast<size_t>(b.channels) * b.t * 4 + static_cast<size_t>(b.t) * 8);
        b.P.resize(b.channels, b.t);
        for (int j = 0; j < b.t; ++j)
            for (int i = 0; i < b.channels; ++i) b.P(i, j) = r.le<float>();
        b.eigenvalues.resize(b.t);
        for (int j = 0; j < b.t; ++j) b.eigenvalues(j) = r.le<double>();
        Eigen::SelfAdjointEigenSolver<Matrix> es(b.P.transpose() * b.P);
        b.P = b.P * es.operatorInverseSqrt();
        basis.taps.push_back(std::move(b));
    }
    if (r.remaining() != 0) throw std::runtime_error("unexpected trailing bytes in basis file");
    return basis;
}

inline void save_basis(const ProjectionBasis& basis, const std::string& path) {
    const std::string bytes = encode_basis(basis);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ProjectionBasis load_basis(const std::string& path) {
    return decode_basis(stylecal::detail::read_file_bytes(path));
}

}  // namespace stylecal::stats
