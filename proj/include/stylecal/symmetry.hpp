#pragma once

// Affine symmetries of the within-layer Gram matrix and checks of how they
// act on a following linear layer.
//
// Feature matrices hold one position per row. An element (b, A) acts on each
// feature vector as x* = A x + b, i.e. X* = X Aᵀ + 1 bᵀ, and preserves
// G(X) = XᵀX / N on zero-mean data with G(X) = I exactly when AAᵀ + bbᵀ = I.

#include <stylecal/transfer.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylecal::symmetry {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

/// (1/N) WᵀW
inline Matrix gram_of(const Matrix& W) { return W.transpose() * W / static_cast<double>(W.rows()); }

/// (1/N) XᵀY
inline Matrix cross_gram_of(const Matrix& X, const Matrix& Y) {
    if (X.rows() != Y.rows()) throw std::invalid_argument("cross Gram needs the same number of positions");
    return X.transpose() * Y / static_cast<double>(X.rows());
}

struct Whitened {
    Matrix X;          // (raw - 1 meanᵀ) * transform
    Vector mean;
    Matrix transform;  // symmetric inverse square root of the 1/N covariance
};

/// Zero mean, identity 1/N covariance. Uses the symmetric inverse square
/// root, so data that is already white comes back unchanged.
inline Whitened whiten(const Matrix& raw) {
    const Eigen::Index N = raw.rows(), C = raw.cols();
    if (N <= C) throw std::invalid_argument("whiten needs more positions than channels");
    Whitened w;
    w.mean = raw.colwise().mean().transpose();
    const Matrix centred = raw.rowwise() - w.mean.transpose();
    const Matrix cov = gram_of(centred);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    const Vector ev = es.eigenvalues();
    if (!(ev.minCoeff() > 1e-12 * std::max(ev.maxCoeff(), 1e-300)))
        throw std::invalid_argument("covariance is singular; cannot whiten");
    w.transform = es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    w.X = centred * w.transform;
    // A second pass removes the rounding left by the first.
    const Matrix g = gram_of(w.X);
    Eigen::SelfAdjointEigenSolver<Matrix> es2(g);
    const Matrix fix = es2.eigenvectors() * es2.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                       es2.eigenvectors().transpose();
    w.X = w.X * fix;
    w.transform = w.transform * fix;
    w.X = w.X.rowwise() - w.X.colwise().mean();
    return w;
}

struct SymmetryElement {
    Vector b;
    Matrix U;
    Matrix A;

    int channels() const { return static_cast<int>(b.size()); }
    double constraint_error() const {
        return max_abs(A * A.transpose() + b * b.transpose() - Matrix::Identity(b.size(), b.size()));
    }
};

inline double orthonormality_error(const Matrix& U) {
    return max_abs(U.transpose() * U - Matrix::Identity(U.cols(), U.cols()));
}

/// A = chol(I - bbᵀ) U with the lower Cholesky factor.
inline SymmetryElement construct_element(const Vector& b, const Matrix& U) {
    const Eigen::Index C = b.size();
    if (C == 0 || U.rows() != C || U.cols() != C) throw std::invalid_argument("b and U dimensions disagree");
    if (!(b.norm() < 1.0)) throw std::invalid_argument("|b| must be strictly less than 1");
    if (orthonormality_error(U) > 1e-10) throw std::invalid_argument("U is not orthonormal");
    const Matrix S = Matrix::Identity(C, C) - b * b.transpose();
    Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("I - bbᵀ is not positive definite");
    return {b, U, llt.matrixL() * U};
}

inline Matrix random_orthonormal(int C, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Matrix Z(C, C);
    for (Eigen::Index i = 0; i < Z.size(); ++i) Z(i) = g(rng);
    Eigen::HouseholderQR<Matrix> qr(Z);
    Matrix Q = qr.householderQ();
    const Matrix R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < C; ++j)
        if (R(j, j) < 0) Q.col(j) = -Q.col(j);
    return Q;
}

/// Uniform direction, norm uniform in [0, max_norm).
inline Vector random_ball_vector(int C, std::mt19937_64& rng, double max_norm = 0.9) {
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.0, max_norm);
    Vector v(C);
    for (int i = 0; i < C; ++i) v(i) = g(rng);
    return v.normalized() * u(rng);
}

inline SymmetryElement random_element(int C, std::mt19937_64& rng, double max_norm = 0.9) {
    const Vector b = random_ball_vector(C, rng, max_norm);
    return construct_element(b, random_orthonormal(C, rng));
}

inline Matrix apply_affine(const Matrix& X, const Matrix& A, const Vector& b) {
    if (A.cols() != X.cols() || b.size() != A.rows()) throw std::invalid_argument("affine map does not fit the features");
    return (X * A.transpose()).rowwise() + b.transpose();
}

inline Matrix apply_element(const Matrix& X, const SymmetryElement& g) { return apply_affine(X, g.A, g.b); }

/// max |G(X*) - G(X)| for the affine map x -> A x + b.
inline double within_deviation(const Matrix& X, const Matrix& A, const Vector& b) {
    return max_abs(gram_of(apply_affine(X, A, b)) - gram_of(X));
}

inline double verify_within_invariance(const Matrix& X, const SymmetryElement& g) {
    return within_deviation(X, g.A, g.b);
}

/// The affine map of applying g1 then g2: x -> A2 (A1 x + b1) + b2.
inline std::pair<Matrix, Vector> compose(const SymmetryElement& g1, const SymmetryElement& g2) {
    return {g2.A * g1.A, g2.A * g1.b + g2.b};
}

// ---------------------------------------------------------------------------
// Second layer

/// H x W grid of C-channel feature vectors, one row per position in row-major order.
struct FeatureGrid {
    int height = 0, width = 0;
    Matrix X;
    int channels() const { return static_cast<int>(X.cols()); }
};

/// For each interior position (windows that fit entirely), the r x r window's
/// feature vectors concatenated in row-major scan order.
inline Matrix stack_windows(const FeatureGrid& grid, int r) {
    if (r < 1 || r % 2 == 0) throw std::invalid_argument("window size must be odd and positive");
    if (grid.X.rows() != static_cast<Eigen::Index>(grid.height) * grid.width)
        throw std::invalid_argument("grid rows do not match its size");
    if (r > grid.height || r > grid.width) throw std::invalid_argument("window larger than the grid");
    const int C = grid.channels(), h = r / 2;
    const int ny = grid.height - r + 1, nx = grid.width - r + 1;
    Matrix S(static_cast<Eigen::Index>(ny) * nx, static_cast<Eigen::Index>(r) * r * C);
    for (int y = h; y < grid.height - h; ++y)
        for (int x = h; x < grid.width - h; ++x) {
            const Eigen::Index row = static_cast<Eigen::Index>(y - h) * nx + (x - h);
            int k = 0;
            for (int dy = -h; dy <= h; ++dy)
                for (int dx = -h; dx <= h; ++dx, ++k)
                    S.block(row, static_cast<Eigen::Index>(k) * C, 1, C) =
                        grid.X.row(static_cast<Eigen::Index>(y + dy) * grid.width + (x + dx));
        }
    return S;
}

/// Centre feature vectors of the windows produced by stack_windows.
inline Matrix window_centres(const FeatureGrid& grid, int r) {
    const int h = r / 2, nx = grid.width - r + 1, ny = grid.height - r + 1;
    Matrix X(static_cast<Eigen::Index>(ny) * nx, grid.channels());
    for (int y = h; y < grid.height - h; ++y)
        for (int x = h; x < grid.width - h; ++x)
            X.row(static_cast<Eigen::Index>(y - h) * nx + (x - h)) = grid.X.row(static_cast<Eigen::Index>(y) * grid.width + x);
    return X;
}

/// Window stacks with the centre vectors they belong to. With r = 1 the
/// stacks are the centres (the point-sample case).
struct WindowSet {
    int r = 1;
    Matrix centres;  // N x C
    Matrix stacks;   // N x r²C
};

inline WindowSet point_windows(const Matrix& X) { return {1, X, X}; }

inline WindowSet grid_windows(const FeatureGrid& grid, int r) { return {r, window_centres(grid, r), stack_windows(grid, r)}; }

/// Spatially homogeneous data: each row of Z (whitened, K x C) fills a
/// tile x tile block, and only windows lying inside one block are kept, so
/// every window correlation is exactly Zᵀ Z / K.
inline WindowSet tiled_windows(const Matrix& Z, int tile, int r) {
    if (tile < r) throw std::invalid_argument("tile must be at least the window size");
    WindowSet out;
    out.r = r;
    std::vector<Matrix> cs, ss;
    for (Eigen::Index k = 0; k < Z.rows(); ++k) {
        FeatureGrid g{tile, tile, Z.row(k).replicate(static_cast<Eigen::Index>(tile) * tile, 1)};
        cs.push_back(window_centres(g, r));
        ss.push_back(stack_windows(g, r));
    }
    const Eigen::Index per = cs.front().rows();
    out.centres.resize(per * Z.rows(), Z.cols());
    out.stacks.resize(per * Z.rows(), static_cast<Eigen::Index>(r) * r * Z.cols());
    for (size_t k = 0; k < cs.size(); ++k) {
        out.centres.middleRows(static_cast<Eigen::Index>(k) * per, per) = cs[k];
        out.stacks.middleRows(static_cast<Eigen::Index>(k) * per, per) = ss[k];
    }
    return out;
}

/// The element acting on every vector inside a stack: blockdiag(A) and b repeated.
inline WindowSet apply_element(const WindowSet& w, const SymmetryElement& g) {
    const int C = g.channels(), k = w.r * w.r;
    Matrix A = Matrix::Zero(static_cast<Eigen::Index>(k) * C, static_cast<Eigen::Index>(k) * C);
    Vector b(static_cast<Eigen::Index>(k) * C);
    for (int i = 0; i < k; ++i) {
        A.block(static_cast<Eigen::Index>(i) * C, static_cast<Eigen::Index>(i) * C, C, C) = g.A;
        b.segment(static_cast<Eigen::Index>(i) * C, C) = g.b;
    }
    return {w.r, apply_element(w.centres, g), apply_affine(w.stacks, A, b)};
}

/// b repeated r² times.
inline Vector stacked(const Vector& b, int r) { return b.replicate(static_cast<Eigen::Index>(r) * r, 1); }

enum class MapMode { PointSample, Homogeneous };

/// y = M ψ(x) + n, with ψ the identity in the point-sample case.
struct LinearLayerMap {
    MapMode mode = MapMode::PointSample;
    int r = 1;
    Matrix M;  // C_out x r²C_in
    Vector n;  // C_out

    void validate(int c_in) const {
        const int expect_r = mode == MapMode::PointSample ? 1 : r;
        if (mode == MapMode::PointSample && r != 1) throw std::invalid_argument("point-sample map has r = 1");
        if (M.cols() != static_cast<Eigen::Index>(expect_r) * expect_r * c_in)
            throw std::invalid_argument("map input width does not match the features");
        if (n.size() != M.rows()) throw std::invalid_argument("map offset does not match its output width");
    }

    Matrix apply(const WindowSet& w) const {
        validate(static_cast<int>(w.centres.cols()));
        if (w.r != (mode == MapMode::PointSample ? 1 : r)) throw std::invalid_argument("window size does not match the map");
        return (w.stacks * M.transpose()).rowwise() + n.transpose();
    }
};

/// Random map whose weights annihilate ψ(b): M ψ(b) = 0.
inline LinearLayerMap annihilating_map(MapMode mode, int r, int c_in, int c_out, const Vector& b, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    LinearLayerMap m;
    m.mode = mode;
    m.r = mode == MapMode::PointSample ? 1 : r;
    m.M.resize(c_out, static_cast<Eigen::Index>(m.r) * m.r * c_in);
    for (Eigen::Index i = 0; i < m.M.size(); ++i) m.M(i) = g(rng);
    m.n.resize(c_out);
    for (int i = 0; i < c_out; ++i) m.n(i) = g(rng);
    const Vector pb = stacked(b, m.r);
    if (pb.squaredNorm() > 0) m.M -= (m.M * pb) * pb.transpose() / pb.squaredNorm();
    return m;
}

inline LinearLayerMap random_map(MapMode mode, int r, int c_in, int c_out, std::mt19937_64& rng) {
    return annihilating_map(mode, r, c_in, c_out, Vector::Zero(c_in), rng);
}

struct CrossCheck {
    double within_deviation = 0.0;     // max |G(Y*) - G(Y)|
    double cross_deviation = 0.0;      // max |G(X*,Y*) - G(X,Y)|
    double predicted_cross = 0.0;      // max |b nᵀ|
    double prediction_error = 0.0;     // max |(G(X*,Y*) - G(X,Y)) - b nᵀ|
};

inline CrossCheck verify_cross_breaks(const WindowSet& w, const LinearLayerMap& map, const SymmetryElement& g) {
    if (g.channels() != w.centres.cols()) throw std::invalid_argument("element does not match the feature width");
    const Matrix Y = map.apply(w);
    const WindowSet ws = apply_element(w, g);
    const Matrix Ys = map.apply(ws);
    CrossCheck c;
    c.within_deviation = max_abs(gram_of(Ys) - gram_of(Y));
    const Matrix delta = cross_gram_of(ws.centres, Ys) - cross_gram_of(w.centres, Y);
    const Matrix predicted = g.b * map.n.transpose();
    c.cross_deviation = max_abs(delta);
    c.predicted_cross = max_abs(predicted);
    c.prediction_error = max_abs(delta - predicted);
    return c;
}

inline CrossCheck verify_cross_breaks(const Matrix& X, const LinearLayerMap& map, const SymmetryElement& g) {
    return verify_cross_breaks(point_windows(X), map, g);
}

// ---------------------------------------------------------------------------
// Randomised sweep for the CLI

struct SweepRow {
    int trial = 0;
    double b_norm = 0.0;
    double constraint_error = 0.0;
    double first_layer_deviation = 0.0;
    double annihilated_within = 0.0, annihilated_cross = 0.0, predicted_cross = 0.0, prediction_error = 0.0;
    double generic_within = 0.0, generic_cross = 0.0;
};

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = g(rng);
    return m;
}

/// Per trial: one random element with b ≠ 0, one map annihilating ψ(b) and
/// one generic map. Homogeneous mode uses r = 3 tiled data with `positions`
/// tiles of 5 x 5.
inline std::vector<SweepRow> symmetry_sweep(int channels, int positions, MapMode mode, int trials, std::uint64_t seed) {
    if (channels < 2) throw std::invalid_argument("need at least 2 channels");
    if (trials < 1) throw std::invalid_argument("need at least one trial");
    std::mt19937_64 rng(seed);
    const Matrix X = whiten(gaussian_matrix(positions, channels, rng)).X;
    const int r = mode == MapMode::PointSample ? 1 : 3;
    const WindowSet w = mode == MapMode::PointSample ? point_windows(X) : tiled_windows(X, 5, 3);
    const int c_out = std::max(1, channels - 1);
    std::vector<SweepRow> rows;
    for (int t = 0; t < trials; ++t) {
        SweepRow row;
        row.trial = t;
        SymmetryElement g = random_element(channels, rng);
        while (g.b.norm() < 0.1) g = random_element(channels, rng);
        row.b_norm = g.b.norm();
        row.constraint_error = g.constraint_error();
        row.first_layer_deviation = verify_within_invariance(X, g);
        const auto a = verify_cross_breaks(w, annihilating_map(mode, r, channels, c_out, g.b, rng), g);
        row.annihilated_within = a.within_deviation;
        row.annihilated_cross = a.cross_deviation;
        row.predicted_cross = a.predicted_cross;
        row.prediction_error = a.prediction_error;
        const auto gen = verify_cross_breaks(w, random_map(mode, r, channels, c_out, rng), g);
        row.generic_within = gen.within_deviation;
        row.generic_cross = gen.cross_deviation;
        rows.push_back(row);
    }
    return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot write");
    out << "trial,b_norm,constraint_error,first_layer_deviation,annihilated_within,annihilated_cross,"
           "predicted_cross,prediction_error,generic_within,generic_cross\n";
    using transfer::format_number;
    for (const auto& r : rows)
        out << r.trial << ',' << format_number(r.b_norm) << ',' << format_number(r.constraint_error) << ','
            << format_number(r.first_layer_deviation) << ',' << format_number(r.annihilated_within) << ','
            << format_number(r.annihilated_cross) << ',' << format_number(r.predicted_cross) << ','
            << format_number(r.prediction_error) << ',' << format_number(r.generic_within) << ','
            << format_number(r.generic_cross) << '\n';
}

// ---------------------------------------------------------------------------
// Across-seed variance of transferred features

struct VarianceReport {
    std::map<std::string, double> variance;  // per style tap, averaged over channels
};

/// Runs `trials` transfers with seeds seed, seed+1, ... and reports, per
/// style tap, the across-trial variance (1/T) of each channel's spatial mean,
/// averaged over channels.
inline VarianceReport variance_experiment(const Image& style, const Image& content, const nn::NetworkSpec& net,
                                          transfer::TransferConfig cfg, int trials, std::uint64_t seed) {
    if (trials < 1) throw std::invalid_argument("need at least one trial");
    const std::vector<std::string> taps(nn::kStyleTaps.begin(), nn::kStyleTaps.end());
    std::map<std::string, std::vector<Vector>> means;
    for (int t = 0; t < trials; ++t) {
        cfg.seed = seed + static_cast<std::uint64_t>(t);
        const auto r = transfer::run_transfer(style, content, net, cfg);
        const auto f = nn::forward(r.image, net, taps);
        for (const auto& tap : taps) means[tap].push_back(stats::channel_mean(f.at(tap)));
    }
    VarianceReport rep;
    for (const auto& tap : taps) {
        const auto& ms = means.at(tap);
        Vector mu = Vector::Zero(ms.front().size());
        for (const auto& m : ms) mu += m;
        mu /= static_cast<double>(ms.size());
        double v = 0.0;
        for (const auto& m : ms) v += (m - mu).squaredNorm();
        rep.variance[tap] = v / (static_cast<double>(ms.size()) * static_cast<double>(mu.size()));
    }
    return rep;
}

}  // namespace stylecal::symmetry
