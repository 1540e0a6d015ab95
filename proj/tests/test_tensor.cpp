#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "ttgan/errors.hpp"
#include "ttgan/tensor.hpp"
#include "ttgan/volume_io.hpp"

using namespace ttgan;

namespace {

DenseTensor random_tensor(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    DenseTensor t(std::move(shape));
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix m(r, c);
    for (auto& v : m.data()) v = nd(rng);
    return m;
}

// Six nested loops over output position and kernel tap, channels innermost.
DenseTensor naive_conv(const DenseTensor& x, const DenseTensor& k, std::size_t stride, std::size_t pad) {
    const std::size_t W = x.dim(0), H = x.dim(1), L = x.dim(2), C = x.dim(3);
    const std::size_t l = k.dim(0), S = k.dim(4);
    const std::size_t Wo = (W + 2 * pad - l) / stride + 1;
    const std::size_t Ho = (H + 2 * pad - l) / stride + 1;
    const std::size_t Lo = (L + 2 * pad - l) / stride + 1;
    DenseTensor y({Wo, Ho, Lo, S});
    for (std::size_t a = 0; a < Wo; ++a)
        for (std::size_t b = 0; b < Ho; ++b)
            for (std::size_t d = 0; d < Lo; ++d)
                for (std::size_t s = 0; s < S; ++s) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < l; ++i)
                        for (std::size_t j = 0; j < l; ++j)
                            for (std::size_t m = 0; m < l; ++m)
                                for (std::size_t c = 0; c < C; ++c) {
                                    const long xi = static_cast<long>(a * stride + i) - static_cast<long>(pad);
                                    const long yi = static_cast<long>(b * stride + j) - static_cast<long>(pad);
                                    const long zi = static_cast<long>(d * stride + m) - static_cast<long>(pad);
                                    if (xi < 0 || yi < 0 || zi < 0 || xi >= static_cast<long>(W) ||
                                        yi >= static_cast<long>(H) || zi >= static_cast<long>(L))
                                        continue;
                                    acc += k.at({i, j, m, c, s}) *
                                           x.at({static_cast<std::size_t>(xi), static_cast<std::size_t>(yi),
                                                 static_cast<std::size_t>(zi), c});
                                }
                    y.at({a, b, d, s}) = acc;
                }
    return y;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST(DenseTensor, RejectsZeroExtentAndEmptyShape) {
    EXPECT_THROW(DenseTensor(Shape{}), ShapeError);
    EXPECT_THROW(DenseTensor(Shape{2, 0}), ShapeError);
    EXPECT_THROW(DenseTensor(Shape{2, 2}, std::vector<double>(3)), ShapeError);
}

TEST(DenseTensor, IndexingIsRowMajor) {
    DenseTensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.at({1, 0}), 4.0);
    EXPECT_EQ(t.at({0, 2}), 3.0);
    EXPECT_THROW(t.at({2, 0}), ArgumentError);
}

TEST(Reshape, RelabelsWithoutMovingData) {
    DenseTensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    auto r = reshape(t, {3, 2});
    EXPECT_EQ(r.shape(), (Shape{3, 2}));
    EXPECT_EQ(r.values(), t.values());
    EXPECT_THROW(reshape(t, {4, 2}), ShapeError);
}

TEST(Reshape, AddsChannelAxisToVolume) {
    DenseTensor v({109, 91, 91});
    auto r = reshape(v, {109, 91, 91, 1});
    EXPECT_EQ(r.size(), 109u * 91u * 91u);
}

TEST(Reshape, FlatElementPreserved) {
    auto t = random_tensor({4, 4}, 3);
    auto r = reshape(t, {2, 2, 2, 2});
    EXPECT_EQ(r[7], t[7]);
    EXPECT_EQ(reshape(r, {4, 4}), t);
}

TEST(Reshape, RoundTripIsIdentityForManyShapes) {
    const std::vector<std::pair<Shape, Shape>> cases = {
        {{6}, {2, 3}}, {{2, 3, 4}, {24}}, {{2, 3, 4}, {4, 3, 2}}, {{1, 5, 1}, {5}}, {{8, 8, 8}, {16, 32}}};
    std::uint64_t seed = 1;
    for (const auto& [a, b] : cases) {
        auto t = random_tensor(a, seed++);
        EXPECT_EQ(reshape(reshape(t, b), a), t);
    }
}

TEST(Unfold, Dimensions) {
    auto t = random_tensor({2, 3, 4}, 1);
    auto m1 = unfold(t, 1);
    EXPECT_EQ(m1.rows(), 2u);
    EXPECT_EQ(m1.cols(), 12u);
    auto m2 = unfold(t, 2);
    EXPECT_EQ(m2.rows(), 6u);
    EXPECT_EQ(m2.cols(), 4u);
    EXPECT_EQ(fold(m2, t.shape()), t);
    EXPECT_THROW(unfold(t, 0), ArgumentError);
    EXPECT_THROW(unfold(t, 3), ArgumentError);
}

TEST(Unfold, RowsAreSlicesByIndexArithmetic) {
    auto t = random_tensor({3, 3, 3}, 7);
    auto m = unfold(t, 1);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(m(i, j * 3 + k), t.at({i, j, k}));
}

TEST(Unfold, IsABijectionOnElements) {
    auto t = random_tensor({2, 3, 2, 2}, 5);
    for (std::size_t split = 1; split < 4; ++split) {
        auto m = unfold(t, split);
        std::vector<int> hits(t.size(), 0);
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < m.cols(); ++c) {
                const std::size_t flat = r * m.cols() + c;
                ++hits[flat];
                EXPECT_EQ(m(r, c), t[flat]);
            }
        for (int h : hits) EXPECT_EQ(h, 1);
        EXPECT_EQ(fold(m, t.shape()), t);
    }
}

TEST(Matmul, IdentityAndDot) {
    auto m = random_matrix(3, 4, 2);
    EXPECT_EQ(matmul(Matrix::identity(3), m), m);
    auto a = random_matrix(1, 5, 3);
    auto b = random_matrix(5, 1, 4);
    EXPECT_NEAR(matmul(a, b)(0, 0), dot(a.data(), b.data()), 1e-14);
    EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
    auto a = random_matrix(5, 4, 11);
    auto b = random_matrix(4, 6, 12);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
            EXPECT_LT(std::abs(c(i, j) - s), 1e-12);
        }
}

TEST(Svd, DiagonalMatrix) {
    Matrix m(3, 3);
    m(0, 0) = 3;
    m(1, 1) = 2;
    m(2, 2) = 1;
    auto r = svd_truncated(m, 3, 0.0);
    ASSERT_EQ(r.rank, 3u);
    EXPECT_NEAR(r.s[0], 3.0, 1e-14);
    EXPECT_NEAR(r.s[1], 2.0, 1e-14);
    EXPECT_NEAR(r.s[2], 1.0, 1e-14);
}

TEST(Svd, RankOneOuterProduct) {
    std::vector<double> u = {1, -2, 3, 0.5}, v = {2, 1, -1};
    Matrix m(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) m(i, j) = u[i] * v[j];
    auto r = svd_truncated(m, 5, 0.0);
    EXPECT_EQ(r.rank, 1u);
    EXPECT_NEAR(r.s[0], frobenius_norm(std::span<const double>(u)) * frobenius_norm(std::span<const double>(v)),
                1e-12);
}

TEST(Svd, ArgumentAndNumericErrors) {
    Matrix m(2, 2, 1.0);
    EXPECT_THROW(svd_truncated(m, 0, 0.0), ArgumentError);
    EXPECT_THROW(svd_truncated(m, 1, -1.0), ArgumentError);
    m(0, 1) = std::nan("");
    EXPECT_THROW(svd_truncated(m, 1, 0.0), NumericError);
}

namespace {

Matrix reconstruct(const SvdResult& r) {
    Matrix out(r.u.rows(), r.v.rows());
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < r.rank; ++k) s += r.u(i, k) * r.s[k] * r.v(j, k);
            out(i, j) = s;
        }
    return out;
}

double orthonormality_defect(const Matrix& q) {
    auto g = matmul(transpose(q), q);
    double m = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) m = std::max(m, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return m;
}

}  // namespace

TEST(Svd, SingularValuesMatchEigenOfGram) {
    auto m = random_matrix(8, 6, 21);
    auto r = svd_truncated(m, 6, 0.0);
    ASSERT_EQ(r.rank, 6u);
    Eigen::MatrixXd e(8, 6);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 6; ++j) e(i, j) = m(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e.transpose() * e);
    for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_NEAR(r.s[k], std::sqrt(es.eigenvalues()(5 - static_cast<long>(k))), 1e-10);
    }
    auto rec = reconstruct(r);
    EXPECT_LT(max_abs_diff(rec.data(), m.data()), 1e-10);
    EXPECT_LT(orthonormality_defect(r.u), 1e-12);
    EXPECT_LT(orthonormality_defect(r.v), 1e-12);
}

TEST(Svd, FullRankReconstructionUpTo32) {
    std::uint64_t seed = 100;
    for (auto [rows, cols] : std::vector<std::pair<std::size_t, std::size_t>>{
             {1, 1}, {2, 7}, {7, 2}, {10, 10}, {17, 9}, {9, 17}, {32, 32}, {32, 20}}) {
        auto m = random_matrix(rows, cols, seed++);
        auto r = svd_truncated(m, std::min(rows, cols), 0.0);
        Matrix diff = reconstruct(r);
        for (std::size_t i = 0; i < diff.data().size(); ++i) diff.data()[i] -= m.data()[i];
        EXPECT_LT(frobenius_norm(diff) / frobenius_norm(m), 1e-10) << rows << "x" << cols;
        for (std::size_t k = 1; k < r.rank; ++k) EXPECT_GE(r.s[k - 1], r.s[k]);
    }
}

TEST(Svd, TruncationHonoursTolerance) {
    auto m = random_matrix(12, 10, 5);
    auto full = svd_truncated(m, 10, 0.0);
    const double norm = frobenius_norm(m);
    for (double tol : {0.05, 0.2, 0.5}) {
        auto r = svd_truncated(m, 10, tol);
        double tail = 0.0;
        for (std::size_t k = r.rank; k < full.rank; ++k) tail += full.s[k] * full.s[k];
        EXPECT_LE(std::sqrt(tail), tol * norm + 1e-12);
        if (r.rank > 1) {
            const double longer = std::sqrt(tail + full.s[r.rank - 1] * full.s[r.rank - 1]);
            EXPECT_GT(longer, tol * norm);
        }
    }
}

TEST(Conv3d, PointwiseScaling) {
    DenseTensor x({3, 3, 3, 1}, 1.0);
    DenseTensor k({1, 1, 1, 1, 1}, 2.0);
    auto y = conv3d_direct(x, k);
    EXPECT_EQ(y.shape(), x.shape());
    for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv3d, DeltaKernelIsIdentity) {
    auto x = random_tensor({4, 5, 3, 1}, 8);
    DenseTensor k({3, 3, 3, 1, 1});
    k.at({1, 1, 1, 0, 0}) = 1.0;
    EXPECT_EQ(conv3d_direct(x, k, 1, 1), x);
}

TEST(Conv3d, MatchesNaiveLoopOracle) {
    auto x = random_tensor({5, 5, 5, 2}, 31);
    auto k = random_tensor({3, 3, 3, 2, 4}, 32);
    for (auto [stride, pad] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
        auto y = conv3d_direct(x, k, stride, pad);
        auto ref = naive_conv(x, k, stride, pad);
        ASSERT_EQ(y.shape(), ref.shape());
        EXPECT_LT(max_abs_diff(y.data(), ref.data()), 1e-12);
    }
}

TEST(Conv3d, OutputExtentAndErrors) {
    EXPECT_EQ(conv_output_extent(8, 3, 1, 0), 6u);
    EXPECT_EQ(conv_output_extent(8, 3, 2, 1), 4u);
    EXPECT_THROW(conv_output_extent(2, 5, 1, 1), ShapeError);
    DenseTensor x({2, 2, 2, 1});
    DenseTensor k({3, 3, 3, 1, 1});
    EXPECT_THROW(conv3d_direct(x, k), ShapeError);
    DenseTensor k2({1, 1, 1, 2, 1});
    EXPECT_THROW(conv3d_direct(x, k2), ShapeError);
}

TEST(Conv3d, Linearity) {
    auto x1 = random_tensor({4, 4, 4, 2}, 40);
    auto x2 = random_tensor({4, 4, 4, 2}, 41);
    auto k = random_tensor({3, 3, 3, 2, 3}, 42);
    const double a = 0.7, b = -1.3;
    DenseTensor mix(x1.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x1[i] + b * x2[i];
    auto lhs = conv3d_direct(mix, k, 1, 1);
    auto y1 = conv3d_direct(x1, k, 1, 1);
    auto y2 = conv3d_direct(x2, k, 1, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * y1[i] + b * y2[i], 1e-12);
}

TEST(Conv3d, BatchedMatchesPerSample) {
    auto x = random_tensor({3, 4, 4, 4, 2}, 50);
    auto k = random_tensor({3, 3, 3, 2, 2}, 51);
    auto y = conv3d_direct(x, k, 2, 1);
    const std::size_t per_in = x.size() / 3;
    for (std::size_t n = 0; n < 3; ++n) {
        DenseTensor xs({4, 4, 4, 2}, std::vector<double>(x.values().begin() + n * per_in,
                                                          x.values().begin() + (n + 1) * per_in));
        auto ys = conv3d_direct(xs, k, 2, 1);
        for (std::size_t i = 0; i < ys.size(); ++i) EXPECT_EQ(y[n * ys.size() + i], ys[i]);
    }
}

TEST(TransposedConv, AdjointIdentity) {
    std::uint64_t seed = 60;
    for (auto [stride, pad] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
        auto x = random_tensor({4, 4, 4, 2}, seed++);
        auto k = random_tensor({3, 3, 3, 2, 3}, seed++);
        auto cx = conv3d_direct(x, k, stride, pad);
        auto y = random_tensor(cx.shape(), seed++);
        auto ty = conv3d_input_grad(y, k, stride, pad, x.shape());
        EXPECT_NEAR(dot(cx.data(), y.data()), dot(x.data(), ty.data()), 1e-10);
    }
}

TEST(TransposedConv, StrideTwoDoublesExtent) {
    auto y = random_tensor({4, 4, 4, 3}, 70);
    auto k = random_tensor({4, 4, 4, 2, 3}, 71);
    auto x = conv3d_transposed(y, k, 2, 1);
    EXPECT_EQ(x.shape(), (Shape{8, 8, 8, 2}));
    EXPECT_EQ(transposed_conv_output_extent(4, 4, 2, 1, 0), 8u);
}

TEST(TransposedConv, OneByOneIsPerVoxelLinearMap) {
    auto y = random_tensor({2, 2, 2, 3}, 72);
    auto k = random_tensor({1, 1, 1, 2, 3}, 73);
    auto x = conv3d_transposed(y, k);
    for (std::size_t p = 0; p < 8; ++p)
        for (std::size_t c = 0; c < 2; ++c) {
            double s = 0.0;
            for (std::size_t q = 0; q < 3; ++q) s += k[c * 3 + q] * y[p * 3 + q];
            EXPECT_NEAR(x[p * 2 + c], s, 1e-14);
        }
}

TEST(KernelGrad, MatchesFiniteDifferenceOfInnerProduct) {
    auto x = random_tensor({4, 4, 4, 2}, 80);
    auto k = random_tensor({3, 3, 3, 2, 2}, 81);
    auto gy = random_tensor(conv3d_direct(x, k, 1, 1).shape(), 82);
    auto gk = conv3d_kernel_grad(x, gy, k.shape(), 1, 1);
    // <conv(x,k), gy> is linear in k, so the gradient entry equals the response to a unit kernel.
    for (std::size_t idx : {0ul, 17ul, 53ul, 107ul}) {
        DenseTensor e(k.shape());
        e[idx] = 1.0;
        EXPECT_NEAR(gk[idx], dot(conv3d_direct(x, e, 1, 1).data(), gy.data()), 1e-12);
    }
}

TEST(VolumeIo, RoundTripIsBitExact) {
    DenseTensor v({3, 4, 5, 1});
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (auto& x : v.data()) x = static_cast<double>(u(rng));
    auto bytes = encode_volume(v);
    auto back = decode_volume(bytes);
    EXPECT_EQ(back, v);
    EXPECT_EQ(encode_volume(back), bytes);
}

TEST(VolumeIo, TruncationNamesByteCounts) {
    DenseTensor v({2, 2, 2}, 0.5);
    auto bytes = encode_volume(v);
    bytes.resize(bytes.size() - 3);
    try {
        decode_volume(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected 32 bytes"), std::string::npos) << msg;
        EXPECT_NE(msg.find("found 29"), std::string::npos) << msg;
    }
}

TEST(VolumeIo, BadMagicReportsOffsetZero) {
    DenseTensor v({2, 2}, 0.5);
    auto bytes = encode_volume(v);
    bytes[0] = 'X';
    try {
        decode_volume(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
}
