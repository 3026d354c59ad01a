#include "test_util.hpp"

#include <stylecal/stats.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

using namespace stylecal;
using namespace stylecal::stats;
using nn::FeatureMap;
using stylecal::testing::integer_map;
using stylecal::testing::random_map;

namespace {

Matrix loop_gram(const FeatureMap& a, const FeatureMap& b) {
    Matrix g = Matrix::Zero(a.channels, b.channels);
    for (int i = 0; i < a.channels; ++i)
        for (int j = 0; j < b.channels; ++j)
            for (int p = 0; p < a.positions(); ++p) g(i, j) += a.at(i, p) * b.at(j, p);
    return g;
}

// Nearest-neighbour replication written with explicit block arithmetic.
FeatureMap loop_upsample(const FeatureMap& m, int H, int W) {
    FeatureMap out(m.tap, m.channels, H, W);
    const int ry = H / m.height, rx = W / m.width;
    for (int k = 0; k < m.channels; ++k)
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x)
                for (int dy = 0; dy < ry; ++dy)
                    for (int dx = 0; dx < rx; ++dx) out.at(k, y * ry + dy, x * rx + dx) = m.at(k, y, x);
    return out;
}

FeatureMap loop_center(const FeatureMap& m) {
    FeatureMap out = m;
    for (int k = 0; k < m.channels; ++k) {
        double s = 0.0;
        for (int p = 0; p < m.positions(); ++p) s += m.at(k, p);
        s /= m.positions();
        for (int p = 0; p < m.positions(); ++p) out.at(k, p) -= s;
    }
    return out;
}

Matrix random_spd(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    Matrix a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = d(rng);
    return a * a.transpose() + 0.5 * Matrix::Identity(n, n);
}

Image texture(int size, std::uint64_t seed) {
    Image img(size, size);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double stripe = 0.5 + 0.4 * std::sin(0.9 * x + 0.3 * y);
            img.at(y, x, 0) = std::clamp(stripe + 0.1 * (u(rng) - 0.5), 0.0, 1.0);
            img.at(y, x, 1) = std::clamp(0.3 + 0.5 * u(rng), 0.0, 1.0);
            img.at(y, x, 2) = std::clamp(1.0 - stripe, 0.0, 1.0);
        }
    return img;
}

}  // namespace

TEST(Gram, AllOnesMap) {
    FeatureMap fm("t", 2, 2, 3, 1.0);
    const Matrix g = gram(fm);
    EXPECT_EQ(g, (Matrix(2, 2) << 6, 6, 6, 6).finished());
}

TEST(Gram, DisjointOneHotChannelsGiveDiagonal) {
    FeatureMap fm("t", 3, 3, 3);
    fm.at(0, 0) = 2.0;
    fm.at(1, 4) = 3.0;
    fm.at(2, 8) = -1.0;
    const Matrix g = gram(fm);
    EXPECT_TRUE(g.isApprox(Vector((Vector(3) << 4, 9, 1).finished()).asDiagonal().toDenseMatrix()));
    EXPECT_EQ(g(0, 1), 0.0);
}

TEST(Gram, MatchesLoopAccumulationExactly) {
    const auto fm = integer_map("t", 3, 4, 4, 17);
    EXPECT_EQ(gram(fm), loop_gram(fm, fm));
}

TEST(Gram, InvariantUnderSpatialPermutation) {
    const auto fm = random_map("t", 4, 5, 5, 3);
    std::vector<int> perm(25);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(8));
    FeatureMap shuffled = fm;
    for (int k = 0; k < 4; ++k)
        for (int p = 0; p < 25; ++p) shuffled.at(k, p) = fm.at(k, perm[p]);
    EXPECT_LT((gram(shuffled) - gram(fm)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossGram, SelfCaseEqualsGram) {
    const auto fm = integer_map("t", 3, 4, 4, 2);
    EXPECT_EQ(cross_gram(fm, fm), gram(fm));
}

TEST(CrossGram, ZeroCoarseMapGivesZero) {
    const auto fine = random_map("a", 2, 4, 4, 1);
    const FeatureMap coarse("b", 3, 2, 2);
    EXPECT_EQ(cross_gram(fine, coarse), Matrix::Zero(2, 3));
}

TEST(CrossGram, MatchesUpsampleThenLoopOracle) {
    const auto fine = random_map("a", 2, 4, 4, 10);
    const auto coarse = random_map("b", 3, 2, 2, 11);
    const Matrix expect = loop_gram(fine, loop_upsample(coarse, 4, 4));
    EXPECT_LT((cross_gram(fine, coarse) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossGram, NonIntegerRatioIsReported) {
    const auto fine = random_map("a", 2, 5, 5, 10);
    const auto coarse = random_map("b", 3, 2, 2, 11);
    EXPECT_THROW(cross_gram(fine, coarse), std::invalid_argument);
    EXPECT_THROW(cross_gram(coarse, fine), std::invalid_argument);
}

TEST(Covariance, ConstantMap) {
    FeatureMap fm("t", 2, 3, 3, 4.0);
    const auto mc = covariance(fm);
    EXPECT_EQ(mc.mean, Vector::Constant(2, 4.0));
    EXPECT_EQ(mc.cov, Matrix::Zero(2, 2));
}

TEST(Covariance, TwoPositionHandCase) {
    const double a = 1.5;
    FeatureMap fm("t", 1, 1, 2);
    fm.at(0, 0) = a;
    fm.at(0, 1) = -a;
    const auto mc = covariance(fm);
    EXPECT_EQ(mc.mean(0), 0.0);
    EXPECT_DOUBLE_EQ(mc.cov(0, 0), 2 * a * a);
}

TEST(Covariance, MatchesLoopOracle) {
    const auto fm = random_map("t", 4, 6, 5, 33);
    const auto mc = covariance(fm);
    const FeatureMap c = loop_center(fm);
    EXPECT_LT((mc.cov - loop_gram(c, c)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, SinglePositionIsAnError) {
    FeatureMap fm("t", 2, 1, 1, 1.0);
    EXPECT_THROW(covariance(fm), std::invalid_argument);
}

TEST(Covariance, ShiftInvariantWhileGramIsNot) {
    const auto fm = random_map("t", 3, 4, 4, 44);
    FeatureMap shifted = fm;
    for (int k = 0; k < 3; ++k)
        for (int p = 0; p < 16; ++p) shifted.at(k, p) += 0.7 * (k + 1);
    EXPECT_LT((covariance(shifted).cov - covariance(fm).cov).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT((gram(shifted) - gram(fm)).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(CrossCovariance, ConstantMapsGiveZero) {
    FeatureMap a("a", 2, 4, 4, 3.0), b("b", 3, 2, 2, -1.0);
    EXPECT_LT(cross_covariance(a, b).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(CrossCovariance, SelfCaseEqualsCovariance) {
    const auto fm = random_map("t", 3, 4, 4, 5);
    EXPECT_LT((cross_covariance(fm, fm) - covariance(fm).cov).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossCovariance, MatchesSubtractThenLoopOracle) {
    const auto fine = random_map("a", 2, 4, 6, 70);
    const auto coarse = random_map("b", 3, 2, 3, 71);
    const Matrix expect = loop_gram(loop_center(fine), loop_upsample(loop_center(coarse), 4, 6));
    EXPECT_LT((cross_covariance(fine, coarse) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ProjectSummary, IdentityBasis) {
    std::mt19937_64 rng(1);
    const Matrix cov = random_spd(4, rng);
    const Vector mean = Vector::LinSpaced(4, -1, 2);
    const auto g = project_summary(mean, cov, Matrix::Identity(4, 4));
    const double eps = 1e-6 * cov.trace() / 4;
    EXPECT_LT((g.mu - mean).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((g.sigma - (cov + eps * Matrix::Identity(4, 4))).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ProjectSummary, UnitCovarianceWithOrthonormalBasis) {
    std::mt19937_64 rng(2);
    const Matrix q = Eigen::HouseholderQR<Matrix>(random_spd(5, rng)).householderQ();
    const Matrix P = q.leftCols(3);
    const auto g = project_summary(Vector::Zero(5), Matrix::Identity(5, 5), P);
    EXPECT_LT((g.sigma - (1.0 + 1e-6) * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ProjectSummary, MatchesDirectProducts) {
    std::mt19937_64 rng(3);
    const Matrix cov = random_spd(6, rng);
    const Matrix P = Eigen::HouseholderQR<Matrix>(random_spd(6, rng)).householderQ() * Matrix::Identity(6, 2);
    const Vector mean = Vector::Random(6);
    const auto g = project_summary(mean, cov, P);
    Matrix s(2, 2);
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            double acc = 0.0;
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) acc += P(i, a) * cov(i, j) * P(j, b);
            s(a, b) = acc;
        }
    const double eps = 1e-6 * s.trace() / 2;
    s.diagonal().array() += eps;
    EXPECT_LT((g.sigma - s).cwiseAbs().maxCoeff(), 1e-12);
    for (int a = 0; a < 2; ++a) EXPECT_NEAR(g.mu(a), P.col(a).dot(mean), 1e-14);
}

TEST(ProjectSummary, SmallestEigenvalueAtLeastRegularizer) {
    // Rank-deficient covariance: the regulariser is all that keeps sigma PD.
    std::mt19937_64 rng(4);
    Matrix v = Matrix::Random(6, 2);
    const Matrix cov = v * v.transpose();
    const Matrix P = Eigen::HouseholderQR<Matrix>(random_spd(6, rng)).householderQ() * Matrix::Identity(6, 4);
    const auto g = project_summary(Vector::Zero(6), cov, P);
    const double eps = 1e-6 * (P.transpose() * cov * P).trace() / 4;
    Eigen::SelfAdjointEigenSolver<Matrix> es(g.sigma);
    EXPECT_GE(es.eigenvalues().minCoeff(), eps * (1 - 1e-9));
}

TEST(GaussianKl, SelfDivergenceIsZero) {
    std::mt19937_64 rng(5);
    GaussianSummary n{Vector::Random(5), random_spd(5, rng)};
    EXPECT_LT(gaussian_kl(n, n), 1e-10);
}

TEST(GaussianKl, UnitShiftInOneDimension) {
    GaussianSummary n0{Vector::Zero(1), Matrix::Identity(1, 1)};
    GaussianSummary n1{Vector::Ones(1), Matrix::Identity(1, 1)};
    EXPECT_NEAR(gaussian_kl(n0, n1), 0.5, 1e-12);
}

TEST(GaussianKl, MatchesMonteCarloOracle) {
    GaussianSummary n0{(Vector(2) << 0.3, -0.2).finished(), (Matrix(2, 2) << 1.2, 0.4, 0.4, 0.8).finished()};
    GaussianSummary n1{(Vector(2) << -0.5, 0.6).finished(), (Matrix(2, 2) << 0.9, -0.3, -0.3, 1.5).finished()};
    // Independent route: explicit 2x2 inverses and determinants.
    auto logpdf = [](const Vector& x, const GaussianSummary& n) {
        const Matrix& s = n.sigma;
        const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
        Matrix inv(2, 2);
        inv << s(1, 1), -s(0, 1), -s(1, 0), s(0, 0);
        inv /= det;
        const Vector d = x - n.mu;
        return -0.5 * d.dot(inv * d) - 0.5 * std::log(det) - std::log(2 * M_PI);
    };
    const Matrix L = n0.sigma.llt().matrixL();
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> z;
    const int n = 1'000'000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const Vector x = n0.mu + L * Vector((Vector(2) << z(rng), z(rng)).finished());
        const double v = logpdf(x, n0) - logpdf(x, n1);
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sumsq / n - mean * mean) / n);
    EXPECT_LT(std::abs(gaussian_kl(n0, n1) - mean), 3 * se);
}

TEST(GaussianKl, NonNegativeAndAsymmetric) {
    std::mt19937_64 rng(6);
    bool found_asymmetry = false;
    for (int trial = 0; trial < 50; ++trial) {
        GaussianSummary a{Vector::Random(3), random_spd(3, rng)};
        GaussianSummary b{Vector::Random(3), random_spd(3, rng)};
        const double ab = gaussian_kl(a, b), ba = gaussian_kl(b, a);
        EXPECT_GE(ab, 0.0);
        EXPECT_GE(ba, 0.0);
        if (std::abs(ab - ba) > 1e-6) found_asymmetry = true;
    }
    EXPECT_TRUE(found_asymmetry);
}

TEST(GaussianKl, NonPositiveDefiniteIsAnError) {
    GaussianSummary a{Vector::Zero(2), Matrix::Identity(2, 2)};
    GaussianSummary b{Vector::Zero(2), (Matrix(2, 2) << 1, 2, 2, 1).finished()};
    EXPECT_THROW(gaussian_kl(a, b), std::runtime_error);
}

TEST(ProjectionBasis, TopEigenvectorsOfIsotropicSample) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> d(0.0, 2.0);
    Matrix X(20000, 6);
    for (int i = 0; i < X.rows(); ++i)
        for (int j = 0; j < 6; ++j) X(i, j) = d(rng);
    const Matrix cov = X.transpose() * X / X.rows();
    const TapBasis b = top_eigenvectors(cov, 4);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(b.eigenvalues(j), 4.0, 0.2);
    EXPECT_LT((b.P.transpose() * b.P - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(ProjectionBasis, SignConventionMakesLargestEntryPositive) {
    std::mt19937_64 rng(10);
    const TapBasis b = top_eigenvectors(random_spd(5, rng), 3);
    for (int j = 0; j < 3; ++j) {
        Eigen::Index arg;
        b.P.col(j).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(b.P(arg, j), 0.0);
    }
}

TEST(ProjectionBasis, SingletonCorpusUsesThatImagesCovariance) {
    const auto net = nn::make_desk_network(3);
    const Image img = texture(32, 1);
    const std::vector<std::string> taps = {"R11", "R21"};
    const auto basis = build_projection_basis({img}, net, taps, {{"R11", 4}, {"R21", 6}});
    const auto maps = nn::forward(img, net, taps);
    for (const auto& tb : basis.taps) {
        const FeatureMap c = loop_center(maps.at(tb.tap));
        const Matrix cov = loop_gram(c, c);
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
        const Vector all = es.eigenvalues().reverse();
        for (int j = 0; j < tb.t; ++j) {
            EXPECT_NEAR(tb.eigenvalues(j), all(j), 1e-9 * all(0));
            const Vector p = tb.P.col(j);
            EXPECT_LT((cov * p - tb.eigenvalues(j) * p).norm(), 1e-8 * all(0));
        }
        EXPECT_LT((tb.P.transpose() * tb.P - Matrix::Identity(tb.t, tb.t)).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(ProjectionBasis, DeterministicGivenCorpusOrder) {
    const auto net = nn::make_desk_network(3);
    const std::vector<Image> corpus = {texture(32, 1), texture(32, 2), texture(32, 3)};
    const std::vector<std::string> taps = {"R11", "R31"};
    const auto dims = default_dims(net, taps);
    const auto a = build_projection_basis(corpus, net, taps, dims);
    const auto b = build_projection_basis(corpus, net, taps, dims);
    for (size_t i = 0; i < a.taps.size(); ++i) EXPECT_EQ(a.taps[i].P, b.taps[i].P);
}

TEST(ProjectionBasis, Errors) {
    const auto net = nn::make_desk_network(3);
    EXPECT_THROW(build_projection_basis({}, net, {"R11"}, {{"R11", 2}}), std::invalid_argument);
    EXPECT_THROW(build_projection_basis({texture(32, 1)}, net, {"R11"}, {{"R11", 9}}), std::invalid_argument);
    const auto zero_bias = nn::make_desk_network(3, {8, 16, 32, 64, 64}, 0.0);
    EXPECT_THROW(build_projection_basis({Image(32, 32, 0.0), Image(32, 32, 0.0)}, zero_bias, {"R11"}, {{"R11", 2}}),
                 std::invalid_argument);
}

TEST(ProjectionBasis, VggWidthDimensions) {
    const auto vgg = nn::make_desk_network(1, {64, 128, 256, 512, 512});
    const auto dims = default_dims(vgg, {"R11", "R21", "R31", "R41", "R51"});
    EXPECT_EQ(dims.at("R11"), 18);
    EXPECT_EQ(dims.at("R21"), 100);
    EXPECT_EQ(dims.at("R31"), 128);
    EXPECT_EQ(dims.at("R41"), 280);
    EXPECT_EQ(dims.at("R51"), 256);
    const auto desk = default_dims(nn::make_desk_network(), {"R11", "R21", "R31", "R41", "R51"});
    EXPECT_EQ(desk.at("R11"), 6);
    EXPECT_EQ(desk.at("R21"), 12);
    EXPECT_EQ(desk.at("R31"), 25);
    EXPECT_EQ(desk.at("R41"), 51);
    EXPECT_EQ(desk.at("R51"), 51);
    const auto at64 = default_dims(nn::make_desk_network(), {"R11", "R21", "R31", "R41", "R51"}, 64, 64);
    EXPECT_EQ(at64.at("R11"), 6);
    EXPECT_EQ(at64.at("R31"), 25);
    EXPECT_EQ(at64.at("R41"), 16);
    EXPECT_EQ(at64.at("R51"), 4);
}

TEST(ProjectionBasis, DeadChannelsAreNotKept) {
    // Channel 1 of the first conv never fires: all its weights are zero and its bias negative.
    auto net = nn::make_desk_network(3);
    auto& conv = net.layers[0];
    const size_t per_out = conv.kernel.size() / conv.out_channels;
    std::fill(conv.kernel.begin() + per_out, conv.kernel.begin() + 2 * per_out, 0.0f);
    conv.bias[1] = -1.0f;
    const std::vector<Image> corpus = {texture(32, 1), texture(32, 2)};
    const auto trimmed = build_projection_basis(corpus, net, {"R11"}, {{"R11", 8}});
    const auto& kept = trimmed.taps[0];
    EXPECT_LE(kept.t, 7);
    EXPECT_GT(kept.eigenvalues.minCoeff(), 1e-9 * kept.eigenvalues(0));
    const auto full = build_projection_basis(corpus, net, {"R11"}, {{"R11", 8}}, 0.0);
    EXPECT_EQ(full.taps[0].t, 8);
    EXPECT_LT(std::abs(full.taps[0].eigenvalues(7)), 1e-12 * full.taps[0].eigenvalues(0));
    EXPECT_EQ(full.taps[0].P.leftCols(kept.t), kept.P);
}

TEST(ProjectionBasis, FileRoundTripKeepsOrthonormality) {
    const auto net = nn::make_desk_network(3);
    const std::vector<std::string> taps = {"R11", "R21", "R31"};
    const auto basis = build_projection_basis({texture(32, 1), texture(32, 5)}, net, taps, default_dims(net, taps));
    const auto path = std::filesystem::temp_directory_path() / "stylecal_basis.ecb";
    save_basis(basis, path.string());
    const auto back = load_basis(path.string());
    ASSERT_EQ(back.taps.size(), basis.taps.size());
    for (size_t i = 0; i < back.taps.size(); ++i) {
        const auto& b = back.taps[i];
        EXPECT_EQ(b.tap, basis.taps[i].tap);
        EXPECT_LT((b.P.transpose() * b.P - Matrix::Identity(b.t, b.t)).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((b.P - basis.taps[i].P).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_EQ(b.eigenvalues, basis.taps[i].eigenvalues);
    }
    std::string bytes = encode_basis(basis);
    EXPECT_THROW(decode_basis(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
    bytes[0] = 'X';
    EXPECT_THROW(decode_basis(bytes), std::runtime_error);
    std::filesystem::remove(path);
}

class BaseE : public ::testing::Test {
protected:
    void SetUp() override {
        net = nn::make_desk_network(5);
        taps = {"R11", "R21", "R31", "R41", "R51"};
        std::vector<Image> corpus;
        for (int i = 0; i < 4; ++i) corpus.push_back(texture(64, 100 + i));
        basis = build_projection_basis(corpus, net, taps, default_dims(net, taps, 64, 64));
    }
    nn::NetworkSpec net;
    std::vector<std::string> taps;
    ProjectionBasis basis;
};

TEST_F(BaseE, SelfComparisonHitsTheClamp) {
    const Image s = texture(64, 7);
    const auto e = base_e(s, s, net, basis);
    ASSERT_EQ(e.size(), 5u);
    for (double v : e) EXPECT_NEAR(v, -std::log(1e-8), 1e-9);
}

TEST_F(BaseE, ResampledNoiseBeatsFlatGray) {
    const Image style = noise_image(64, 64, 1, 0.5, 0.2);
    const Image resampled = noise_image(64, 64, 2, 0.5, 0.2);
    const Image gray(64, 64, 0.5);
    const auto good = base_e(resampled, style, net, basis);
    const auto bad = base_e(gray, style, net, basis);
    for (size_t i = 0; i < good.size(); ++i) EXPECT_GT(good[i], bad[i]) << taps[i];
}

TEST_F(BaseE, NonDecreasingAlongBlendTowardsStyle) {
    const Image style = texture(64, 9);
    std::vector<std::vector<double>> es;
    for (double x : {0.25, 0.5, 1.0}) {
        Image blend(64, 64);
        for (size_t i = 0; i < blend.data.size(); ++i) blend.data[i] = x * style.data[i] + (1 - x) * 0.5;
        es.push_back(base_e(blend, style, net, basis));
    }
    for (size_t t = 0; t < 5; ++t) {
        EXPECT_LE(es[0][t], es[1][t]) << taps[t];
        EXPECT_LE(es[1][t], es[2][t]) << taps[t];
    }
}
