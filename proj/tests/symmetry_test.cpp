#include <stylecal/fixtures.hpp>
#include <stylecal/symmetry.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace stylecal;
using namespace stylecal::symmetry;

namespace {

Matrix white_data(int N, int C, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Matrix raw = gaussian_matrix(N, C, rng);
    // Correlate the channels so whitening has work to do.
    raw = raw * (Matrix::Identity(C, C) + 0.5 * gaussian_matrix(C, C, rng));
    return whiten(raw).X;
}

Matrix rotation2(double t) {
    Matrix R(2, 2);
    R << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
    return R;
}

}  // namespace

TEST(Whiten, RandomGaussianMeetsTheInvariants) {
    std::mt19937_64 rng(1);
    const Matrix raw = gaussian_matrix(200, 4, rng) * 3.0 + Matrix::Constant(200, 4, 2.0);
    const auto w = whiten(raw);
    EXPECT_LT(w.X.colwise().mean().cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT(max_abs(gram_of(w.X) - Matrix::Identity(4, 4)), 1e-8);
    const Matrix again = (raw.rowwise() - w.mean.transpose()) * w.transform;
    EXPECT_LT(max_abs(again - w.X), 1e-10);
}

TEST(Whiten, AlreadyWhiteInputIsUnchanged) {
    const Matrix X = white_data(300, 5, 2);
    const auto w = whiten(X);
    EXPECT_LT(max_abs(w.X - X), 1e-10);
    EXPECT_LT(max_abs(gram_of(w.X) - Matrix::Identity(5, 5)), 1e-8);
}

TEST(Whiten, Preconditions) {
    std::mt19937_64 rng(3);
    EXPECT_THROW(whiten(gaussian_matrix(4, 4, rng)), std::invalid_argument);
    EXPECT_THROW(whiten(gaussian_matrix(3, 4, rng)), std::invalid_argument);
    Matrix dup = gaussian_matrix(50, 3, rng);
    dup.col(2) = dup.col(0);
    EXPECT_THROW(whiten(dup), std::invalid_argument);
}

TEST(ConstructElement, IdentityElement) {
    const auto g = construct_element(Vector::Zero(4), Matrix::Identity(4, 4));
    EXPECT_EQ(g.A, Matrix::Identity(4, 4));
}

TEST(ConstructElement, HandCholesky) {
    Vector b(2);
    b << 0.6, 0.0;
    const auto g = construct_element(b, Matrix::Identity(2, 2));
    Matrix expect(2, 2);
    expect << 0.64, 0.0, 0.0, 1.0;
    EXPECT_LT(max_abs(g.A * g.A.transpose() - expect), 1e-12);
    EXPECT_NEAR(g.A(0, 0), 0.8, 1e-15);
    EXPECT_LT(g.constraint_error(), 1e-12);
}

TEST(ConstructElement, Boundary) {
    Vector unit(3);
    unit << 0.0, 1.0, 0.0;
    EXPECT_THROW(construct_element(unit, Matrix::Identity(3, 3)), std::invalid_argument);
    EXPECT_THROW(construct_element(1.2 * unit, Matrix::Identity(3, 3)), std::invalid_argument);
    Matrix skew = Matrix::Identity(3, 3);
    skew(0, 1) = 0.1;
    EXPECT_THROW(construct_element(0.5 * unit, skew), std::invalid_argument);
    EXPECT_THROW(construct_element(Vector::Zero(2), Matrix::Identity(3, 3)), std::invalid_argument);
}

TEST(ApplyElement, IdentityLeavesFeatures) {
    const Matrix X = white_data(50, 3, 4);
    EXPECT_EQ(apply_element(X, construct_element(Vector::Zero(3), Matrix::Identity(3, 3))), X);
}

TEST(ApplyElement, RotationKeepsTheGram) {
    const Matrix X = white_data(80, 2, 5);
    const auto g = construct_element(Vector::Zero(2), rotation2(0.7));
    const Matrix Xs = apply_element(X, g);
    EXPECT_GT(max_abs(Xs - X), 0.1);
    EXPECT_LT(max_abs(gram_of(Xs) - gram_of(X)), 1e-8);
}

TEST(ApplyElement, MatchesDirectArithmetic) {
    std::mt19937_64 rng(6);
    const Matrix X = white_data(40, 4, 6);
    const auto g = random_element(4, rng);
    const Matrix Xs = apply_element(X, g);
    for (int p = 0; p < 40; ++p)
        for (int i = 0; i < 4; ++i) {
            double v = g.b(i);
            for (int j = 0; j < 4; ++j) v += g.A(i, j) * X(p, j);
            EXPECT_NEAR(Xs(p, i), v, 1e-14);
        }
}

TEST(WithinInvariance, HundredRandomElements) {
    std::mt19937_64 rng(7);
    const Matrix X = white_data(500, 6, 7);
    for (int t = 0; t < 100; ++t) {
        const auto g = random_element(6, rng);
        EXPECT_LT(g.constraint_error(), 1e-8);
        EXPECT_LT(orthonormality_error(g.U), 1e-10);
        EXPECT_LT(verify_within_invariance(X, g), 1e-8) << t;
    }
}

TEST(WithinInvariance, ArbitraryLinearMapIsNotASymmetry) {
    std::mt19937_64 rng(8);
    const Matrix X = white_data(500, 6, 8);
    const Matrix A = gaussian_matrix(6, 6, rng) * 0.4;
    const Vector b = random_ball_vector(6, rng);
    EXPECT_GT(within_deviation(X, A, b), 1e-3);
}

// Acting on rows as X A + 1bᵀ needs AᵀA + bbᵀ = I instead; the Cholesky
// construction gives AAᵀ, so only the column action x -> A x + b is a symmetry.
TEST(WithinInvariance, TransposedActionIsNotASymmetry) {
    std::mt19937_64 rng(9);
    const Matrix X = white_data(500, 6, 9);
    Vector b = Vector::Zero(6);
    b(0) = 0.7;
    const auto g = construct_element(b, random_orthonormal(6, rng));
    EXPECT_LT(within_deviation(X, g.A, g.b), 1e-8);
    EXPECT_GT(within_deviation(X, g.A.transpose(), g.b), 1e-3);
}

TEST(WithinInvariance, CompositionChangesTheGramByTheCrossTerm) {
    std::mt19937_64 rng(10);
    const Matrix X = white_data(500, 5, 10);
    for (int t = 0; t < 20; ++t) {
        const auto g1 = random_element(5, rng), g2 = random_element(5, rng);
        const auto [A, b] = compose(g1, g2);
        const Matrix predicted = g2.A * g1.b * g2.b.transpose() + g2.b * g1.b.transpose() * g2.A.transpose();
        const Matrix measured = gram_of(apply_affine(X, A, b)) - gram_of(X);
        EXPECT_LT(max_abs(measured - predicted), 1e-10);
    }
    // With either offset zero the composite is again a symmetry.
    const auto r1 = construct_element(Vector::Zero(5), random_orthonormal(5, rng));
    const auto g2 = random_element(5, rng);
    const auto [A1, b1] = compose(r1, g2);
    EXPECT_LT(within_deviation(X, A1, b1), 1e-8);
    const auto [A2, b2] = compose(g2, r1);
    EXPECT_LT(within_deviation(X, A2, b2), 1e-8);
    const auto g3 = random_element(5, rng);
    const auto [A3, b3] = compose(g2, g3);
    EXPECT_GT(within_deviation(X, A3, b3), 1e-3);
}

TEST(PointSample, IdentityElementChangesNothing) {
    std::mt19937_64 rng(11);
    const Matrix X = white_data(300, 4, 11);
    const auto map = random_map(MapMode::PointSample, 1, 4, 3, rng);
    const auto c = verify_cross_breaks(X, map, construct_element(Vector::Zero(4), Matrix::Identity(4, 4)));
    EXPECT_EQ(c.within_deviation, 0.0);
    EXPECT_EQ(c.cross_deviation, 0.0);
}

TEST(PointSample, AnnihilatedOffsetMovesTheCrossGramByBNt) {
    std::mt19937_64 rng(12);
    const Matrix X = white_data(2000, 6, 12);
    for (int t = 0; t < 20; ++t) {
        auto g = random_element(6, rng);
        while (g.b.norm() < 0.2) g = random_element(6, rng);
        const auto map = annihilating_map(MapMode::PointSample, 1, 6, 4, g.b, rng);
        EXPECT_LT((map.M * g.b).cwiseAbs().maxCoeff(), 1e-12);
        const auto c = verify_cross_breaks(X, map, g);
        EXPECT_LT(c.within_deviation, 1e-8);
        EXPECT_LT(c.prediction_error, 1e-6);
        EXPECT_NEAR(c.cross_deviation, c.predicted_cross, 1e-6);
        EXPECT_GT(c.cross_deviation, 1e-3);
    }
}

TEST(PointSample, GenericOffsetBreaksBothGrams) {
    std::mt19937_64 rng(13);
    const Matrix X = white_data(500, 6, 13);
    for (int t = 0; t < 20; ++t) {
        auto g = random_element(6, rng);
        while (g.b.norm() < 0.2) g = random_element(6, rng);
        const auto map = random_map(MapMode::PointSample, 1, 6, 4, rng);
        const auto c = verify_cross_breaks(X, map, g);
        EXPECT_GT(c.cross_deviation, 1e-3);
        const Matrix Mb = map.M * g.b;
        const Matrix predicted = Mb * map.n.transpose() + map.n * Mb.transpose();
        EXPECT_NEAR(c.within_deviation, max_abs(predicted), 1e-10);
    }
}

TEST(PointSample, RotationsKeepTheCrossGram) {
    std::mt19937_64 rng(14);
    const Matrix X = white_data(500, 6, 14);
    const auto g = construct_element(Vector::Zero(6), random_orthonormal(6, rng));
    const auto c = verify_cross_breaks(X, random_map(MapMode::PointSample, 1, 6, 4, rng), g);
    EXPECT_LT(c.within_deviation, 1e-8);
    EXPECT_LT(c.cross_deviation, 1e-8);
}

TEST(PointSample, DimensionMismatch) {
    std::mt19937_64 rng(15);
    const Matrix X = white_data(100, 4, 15);
    const auto map = random_map(MapMode::PointSample, 1, 5, 3, rng);
    EXPECT_THROW(verify_cross_breaks(X, map, random_element(4, rng)), std::invalid_argument);
    EXPECT_THROW(verify_cross_breaks(X, random_map(MapMode::PointSample, 1, 4, 3, rng), random_element(3, rng)),
                 std::invalid_argument);
}

TEST(StackWindows, PointWindowIsTheFeatureMatrix) {
    std::mt19937_64 rng(16);
    const FeatureGrid g{3, 4, gaussian_matrix(12, 2, rng)};
    EXPECT_EQ(stack_windows(g, 1), g.X);
}

TEST(StackWindows, RampCentreWindow) {
    FeatureGrid g{3, 3, Matrix(9, 1)};
    for (int i = 0; i < 9; ++i) g.X(i, 0) = i;
    const Matrix s = stack_windows(g, 3);
    ASSERT_EQ(s.rows(), 1);
    for (int i = 0; i < 9; ++i) EXPECT_EQ(s(0, i), i);
}

TEST(StackWindows, ShapeAndOrder) {
    std::mt19937_64 rng(17);
    const FeatureGrid g{4, 5, gaussian_matrix(20, 3, rng)};
    const Matrix s = stack_windows(g, 3);
    EXPECT_EQ(s.rows(), 6);
    EXPECT_EQ(s.cols(), 27);
    // Window at interior (2, 3): its top-left entry is grid (1, 2).
    EXPECT_EQ(s.block(1 * 3 + 2, 0, 1, 3), g.X.row(1 * 5 + 2));
    EXPECT_EQ(s.block(1 * 3 + 2, 4 * 3, 1, 3), g.X.row(2 * 5 + 3));
    EXPECT_THROW(stack_windows(g, 2), std::invalid_argument);
    EXPECT_THROW(stack_windows(g, 5), std::invalid_argument);
}

TEST(Homogeneous, TiledDataHasIdentityWindowCorrelation) {
    const Matrix Z = white_data(200, 3, 18);
    const auto w = tiled_windows(Z, 5, 3);
    const Matrix S = gram_of(w.stacks);
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j)
            EXPECT_LT(max_abs(S.block(i * 3, j * 3, 3, 3) - Matrix::Identity(3, 3)), 1e-8);
}

TEST(Homogeneous, StackedOffsetInTheKernelKeepsTheSecondLayerGram) {
    std::mt19937_64 rng(19);
    const auto w = tiled_windows(white_data(300, 4, 19), 5, 3);
    for (int t = 0; t < 10; ++t) {
        auto g = random_element(4, rng);
        while (g.b.norm() < 0.2) g = random_element(4, rng);
        const auto map = annihilating_map(MapMode::Homogeneous, 3, 4, 5, g.b, rng);
        EXPECT_LT((map.M * stacked(g.b, 3)).cwiseAbs().maxCoeff(), 1e-12);
        const auto c = verify_cross_breaks(w, map, g);
        EXPECT_LT(c.within_deviation, 1e-8);
        EXPECT_LT(c.prediction_error, 1e-6);
        EXPECT_GT(c.cross_deviation, 1e-3);
        const auto generic = verify_cross_breaks(w, random_map(MapMode::Homogeneous, 3, 4, 5, rng), g);
        EXPECT_GT(generic.within_deviation, 1e-3);
    }
}

TEST(Sweep, RowsAndCsv) {
    const auto rows = symmetry_sweep(6, 500, MapMode::PointSample, 5, 1);
    ASSERT_EQ(rows.size(), 5u);
    for (const auto& r : rows) {
        EXPECT_LT(r.first_layer_deviation, 1e-8);
        EXPECT_LT(r.prediction_error, 1e-6);
        EXPECT_GT(r.generic_cross, 1e-3);
    }
    const auto homog = symmetry_sweep(3, 60, MapMode::Homogeneous, 3, 2);
    for (const auto& r : homog) EXPECT_LT(r.annihilated_within, 1e-8);
    const auto path = std::filesystem::temp_directory_path() / "stylecal_sweep.csv";
    write_sweep_csv(rows, path.string());
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header.substr(0, 20), "trial,b_norm,constra");
    int n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    EXPECT_EQ(n, 5);
    std::filesystem::remove(path);
    EXPECT_EQ(symmetry_sweep(6, 500, MapMode::PointSample, 5, 1)[3].generic_cross, rows[3].generic_cross);
}

TEST(VarianceExperiment, SingleTrialAndDeterminism) {
    const auto net = nn::make_desk_network(2);
    const auto d = fixtures::desk_set(1, 1, 32);
    transfer::TransferConfig cfg;
    cfg.method = transfer::Method::XL;
    cfg.iterations = 5;
    cfg.working_width = 32;
    const auto one = variance_experiment(d.styles[0], d.contents[0].image, net, cfg, 1, 3);
    for (const auto& [tap, v] : one.variance) EXPECT_EQ(v, 0.0) << tap;
    const auto a = variance_experiment(d.styles[0], d.contents[0].image, net, cfg, 3, 3);
    const auto b = variance_experiment(d.styles[0], d.contents[0].image, net, cfg, 3, 3);
    EXPECT_EQ(a.variance, b.variance);
    EXPECT_GT(a.variance.at("R11"), 0.0);
}
