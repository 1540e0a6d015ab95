#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <random>

#include "ttgan/errors.hpp"
#include "ttgan/tt.hpp"

using namespace ttgan;

namespace {

DenseTensor random_tensor(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    DenseTensor t(std::move(shape));
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

double rel_error(const DenseTensor& a, const DenseTensor& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

// Multi-index of a flat row-major position.
std::vector<std::size_t> unravel(std::size_t flat, const Shape& shape) {
    std::vector<std::size_t> idx(shape.size());
    for (std::size_t k = shape.size(); k-- > 0;) {
        idx[k] = flat % shape[k];
        flat /= shape[k];
    }
    return idx;
}

// Eigen-backed singular values of a row-major matrix.
Eigen::VectorXd eigen_singular_values(const Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(static_cast<long>(i), static_cast<long>(j)) = m(i, j);
    return Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues();
}

}  // namespace

TEST(TTTensor, ValidatesChain) {
    EXPECT_THROW(TTTensor({DenseTensor({2, 3, 1})}), ArgumentError);
    EXPECT_THROW(TTTensor({DenseTensor({1, 3, 2}), DenseTensor({3, 3, 1})}), ArgumentError);
    EXPECT_THROW(TTTensor({DenseTensor({1, 3})}), ShapeError);
    TTTensor ok({DenseTensor({1, 3, 2}), DenseTensor({2, 4, 1})});
    EXPECT_EQ(ok.mode_sizes(), (Shape{3, 4}));
    EXPECT_EQ(ok.ranks(), (std::vector<std::size_t>{1, 2, 1}));
}

TEST(TTElement, OnesCores) {
    TTTensor t({DenseTensor({1, 2, 1}, 1.0), DenseTensor({1, 3, 1}, 1.0), DenseTensor({1, 4, 1}, 1.0)});
    for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(tt_element(t, unravel(i, {2, 3, 4})), 1.0);
}

TEST(TTElement, SeparableTensor) {
    DenseTensor a({1, 3, 1}, {1, 2, 3}), b({1, 2, 1}, {-1, 4}), c({1, 2, 1}, {0.5, 2});
    TTTensor t({a, b, c});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t k = 0; k < 2; ++k) {
                std::vector<std::size_t> idx{i, j, k};
                EXPECT_DOUBLE_EQ(tt_element(t, idx), a[i] * b[j] * c[k]);
            }
}

TEST(TTElement, AgreesWithDenseAtRandomIndices) {
    std::vector<std::size_t> ranks{1, 2, 3, 1};
    auto t = tt_random({3, 4, 5}, ranks, 17);
    auto dense = tt_to_dense(t);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> pick(0, dense.size() - 1);
    for (int n = 0; n < 20; ++n) {
        const std::size_t flat = pick(rng);
        EXPECT_NEAR(tt_element(t, unravel(flat, {3, 4, 5})), dense[flat], 1e-12);
    }
    std::vector<std::size_t> bad{3, 0, 0};
    EXPECT_THROW(tt_element(t, bad), ArgumentError);
}

TEST(TTElement, ExhaustivelyEqualsDense) {
    std::uint64_t seed = 1;
    for (const Shape& modes : std::vector<Shape>{{4, 4, 4}, {2, 3, 4, 5}, {16, 16, 16}, {8, 8, 8, 8}}) {
        auto ranks = uniform_rank_chain(modes, 3);
        auto t = tt_random(modes, ranks, seed++);
        auto dense = tt_to_dense(t);
        ASSERT_LE(dense.size(), 4096u);
        for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(tt_element(t, unravel(i, modes)), dense[i], 1e-12);
    }
}

TEST(TTToDense, SingleCoreAndZeroCores) {
    DenseTensor core({1, 5, 1}, {1, 2, 3, 4, 5});
    auto v = tt_to_dense(TTTensor({core}));
    EXPECT_EQ(v.shape(), (Shape{5}));
    EXPECT_EQ(v.values(), core.values());
    TTTensor z({DenseTensor({1, 2, 2}), DenseTensor({2, 3, 1})});
    const auto zd = tt_to_dense(z);
    for (double x : zd.data()) EXPECT_EQ(x, 0.0);
}

TEST(TTToDense, CapacityGuard) {
    std::vector<std::size_t> ranks{1, 1, 1, 1};
    auto t = tt_random({512, 512, 128}, ranks, 1);
    EXPECT_THROW(tt_to_dense(t), CapacityError);
}

TEST(TTSvd, SeparableGivesRankOne) {
    DenseTensor x({3, 4, 2});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t k = 0; k < 2; ++k) x.at({i, j, k}) = (i + 1.0) * (j - 1.5) * (k + 0.25);
    std::vector<std::size_t> mr{3, 2};
    auto r = tt_svd(x, mr, 0.0);
    EXPECT_EQ(r.tt.ranks(), (std::vector<std::size_t>{1, 1, 1, 1}));
    EXPECT_LT(rel_error(tt_to_dense(r.tt), x), 1e-12);
}

TEST(TTSvd, FullRankRoundTrip) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto x = random_tensor({4, 4, 4}, seed);
        std::vector<std::size_t> mr{4, 4};
        auto r = tt_svd(x, mr, 0.0);
        EXPECT_LT(rel_error(tt_to_dense(r.tt), x), 1e-10);
        EXPECT_LT(r.relative_error, 1e-10);
    }
}

TEST(TTSvd, RankOneTruncationAgainstTailOracle) {
    auto x = random_tensor({4, 4, 4}, 99);
    std::vector<std::size_t> mr{1, 1};
    auto r = tt_svd(x, mr, 0.0);
    // The sweep error is bounded by the root-sum-square of the discarded tails of each
    // unfolding, and no rank-(1,1) TT beats the first unfolding's rank-1 tail.
    const double norm = frobenius_norm(x);
    double bound_sq = 0.0;
    double lower = 0.0;
    for (std::size_t split = 1; split < 3; ++split) {
        auto s = eigen_singular_values(unfold(x, split));
        double tail = 0.0;
        for (long k = 1; k < s.size(); ++k) tail += s(k) * s(k);
        bound_sq += tail;
        lower = std::max(lower, std::sqrt(tail));
    }
    const double err = r.relative_error * norm;
    EXPECT_LE(err, std::sqrt(bound_sq) + 1e-12);
    EXPECT_GE(err, lower - 1e-12);
    EXPECT_LE(err, 2.0 * lower);
}

TEST(TTSvd, RanksNeverExceedDimensionBounds) {
    auto x = random_tensor({2, 3, 4, 2}, 5);
    std::vector<std::size_t> mr{50, 50, 50};
    auto r = tt_svd(x, mr, 0.0);
    auto ranks = r.tt.ranks();
    const Shape modes{2, 3, 4, 2};
    for (std::size_t k = 1; k < 4; ++k) {
        std::size_t left = 1, right = 1;
        for (std::size_t i = 0; i < k; ++i) left *= modes[i];
        for (std::size_t i = k; i < 4; ++i) right *= modes[i];
        EXPECT_LE(ranks[k], std::min(left, right));
    }
}

TEST(TTSvd, ErrorMonotoneOverRankLadder) {
    auto x = random_tensor({5, 5, 5}, 7);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t r = 1; r <= 5; ++r) {
        std::vector<std::size_t> mr{r, r};
        const double e = tt_svd(x, mr, 0.0).relative_error;
        EXPECT_LE(e, prev + 1e-12);
        prev = e;
    }
    double prev2 = std::numeric_limits<double>::infinity();
    for (std::size_t r = 1; r <= 5; ++r) {
        std::vector<std::size_t> mr{2, r};
        const double e = tt_svd(x, mr, 0.0).relative_error;
        EXPECT_LE(e, prev2 + 1e-12);
        prev2 = e;
    }
}

TEST(TTSvd, Errors) {
    auto x = random_tensor({2, 2, 2}, 1);
    std::vector<std::size_t> wrong{2};
    EXPECT_THROW(tt_svd(x, wrong, 0.0), ArgumentError);
    std::vector<std::size_t> zero{0, 2};
    EXPECT_THROW(tt_svd(x, zero, 0.0), ArgumentError);
    x[3] = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> ok{2, 2};
    EXPECT_THROW(tt_svd(x, ok, 0.0), NumericError);
}

namespace {

TTMatrix identity_tt(const Shape& modes) {
    std::vector<DenseTensor> cores;
    for (std::size_t n : modes) {
        DenseTensor c({1, n, n, 1});
        for (std::size_t i = 0; i < n; ++i) c.at({0, i, i, 0}) = 1.0;
        cores.push_back(c);
    }
    return TTMatrix(cores);
}

}  // namespace

TEST(TTMatvec, IdentityAndZeroCores) {
    auto w = identity_tt({2, 3, 2});
    auto x = random_tensor({2, 3, 2}, 4);
    auto y = tt_matvec(w, x, DenseTensor({2, 3, 2}));
    EXPECT_EQ(y.values(), x.values());

    TTMatrix z({DenseTensor({1, 2, 3, 2}), DenseTensor({2, 2, 2, 1})});
    auto b = random_tensor({2, 2}, 5);
    auto xz = random_tensor({3, 2}, 6);
    EXPECT_EQ(tt_matvec(z, xz, b).values(), b.values());
}

TEST(TTMatvec, MatchesDenseMaterialization) {
    std::vector<std::size_t> ranks{1, 3, 1};
    auto w = tt_matrix_random({3, 4}, {2, 5}, ranks, 8);
    auto x = random_tensor({2, 5}, 9);
    auto b = random_tensor({3, 4}, 10);
    auto y = tt_matvec(w, x, b);
    auto W = tt_to_dense(w);
    ASSERT_EQ(W.rows(), 12u);
    ASSERT_EQ(W.cols(), 10u);
    for (std::size_t i = 0; i < 12; ++i) {
        double s = b[i];
        for (std::size_t j = 0; j < 10; ++j) s += W(i, j) * x[j];
        EXPECT_NEAR(y[i], s, 1e-10);
    }
}

TEST(TTMatvec, MaterializationByElementChain) {
    // Independent evaluation of W(i, j) as the product of core slices.
    std::vector<std::size_t> ranks{1, 2, 3, 1};
    auto w = tt_matrix_random({2, 3, 2}, {3, 2, 2}, ranks, 12);
    auto W = tt_to_dense(w);
    const Shape rm{2, 3, 2}, cm{3, 2, 2};
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j) {
            auto ri = unravel(i, rm);
            auto cj = unravel(j, cm);
            std::vector<double> row{1.0};
            for (std::size_t k = 0; k < 3; ++k) {
                const auto& core = w.cores()[k];
                const std::size_t r0 = core.dim(0), r1 = core.dim(3);
                std::vector<double> next(r1, 0.0);
                for (std::size_t a = 0; a < r0; ++a)
                    for (std::size_t b = 0; b < r1; ++b) next[b] += row[a] * core.at({a, ri[k], cj[k], b});
                row = next;
            }
            EXPECT_NEAR(W(i, j), row[0], 1e-12);
        }
}

TEST(TTMatvec, BatchedAndLinear) {
    std::vector<std::size_t> ranks{1, 2, 1};
    auto w = tt_matrix_random({2, 2}, {3, 2}, ranks, 13);
    auto x1 = random_tensor({3, 2}, 14), x2 = random_tensor({3, 2}, 15);
    auto b1 = random_tensor({2, 2}, 16), b2 = random_tensor({2, 2}, 17);
    const double a = 1.5, c = -0.25;
    DenseTensor xm(x1.shape()), bm(b1.shape());
    for (std::size_t i = 0; i < xm.size(); ++i) xm[i] = a * x1[i] + c * x2[i];
    for (std::size_t i = 0; i < bm.size(); ++i) bm[i] = a * b1[i] + c * b2[i];
    auto lhs = tt_matvec(w, xm, bm);
    auto y1 = tt_matvec(w, x1, b1), y2 = tt_matvec(w, x2, b2);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * y1[i] + c * y2[i], 1e-12);

    DenseTensor batch({2, 3, 2});
    std::copy(x1.data().begin(), x1.data().end(), batch.data().begin());
    std::copy(x2.data().begin(), x2.data().end(), batch.data().begin() + 6);
    auto yb = tt_matvec(w, batch, b1);
    auto y2b = tt_matvec(w, x2, b1);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(yb[i], y1[i], 1e-14);
        EXPECT_NEAR(yb[4 + i], y2b[i], 1e-14);
    }
    EXPECT_THROW(tt_matvec(w, random_tensor({2, 3}, 1), b1), ShapeError);
    EXPECT_THROW(tt_matvec(w, x1, random_tensor({4}, 1)), ShapeError);
}

TEST(ParamCount, FormulaExamples) {
    TTTensor t({DenseTensor({1, 4, 2}), DenseTensor({2, 4, 2}), DenseTensor({2, 4, 1})});
    auto p = tt_param_count(t);
    EXPECT_EQ(p.tt_params, 32u);
    EXPECT_EQ(p.dense_params, 64u);
    EXPECT_DOUBLE_EQ(p.ratio, 2.0);

    const std::size_t n = 7;
    TTTensor ones({DenseTensor({1, n, 1}), DenseTensor({1, n, 1}), DenseTensor({1, n, 1})});
    EXPECT_EQ(tt_param_count(ones).tt_params, 3 * n);

    std::vector<std::size_t> ranks{1, 3, 2, 1};
    auto w = tt_matrix_random({2, 3, 4}, {5, 2, 2}, ranks, 1);
    auto pw = tt_param_count(w);
    EXPECT_EQ(pw.tt_params, 10u * 1 * 3 + 6u * 3 * 2 + 8u * 2 * 1);
    EXPECT_EQ(pw.dense_params, 24u * 20u);
}

TEST(ParamCount, RatioAboveOneBelowBounds) {
    std::uint64_t seed = 0;
    for (const Shape& modes : std::vector<Shape>{{4, 4, 4}, {8, 8, 8}, {6, 5, 7, 3}}) {
        for (std::size_t r = 1; r <= 3; ++r) {
            auto ranks = uniform_rank_chain(modes, r);
            bool below = true;
            std::size_t left = 1;
            for (std::size_t k = 1; k < modes.size(); ++k) {
                left *= modes[k - 1];
                std::size_t right = 1;
                for (std::size_t i = k; i < modes.size(); ++i) right *= modes[i];
                below = below && ranks[k] < std::min(left, right);
            }
            if (!below) continue;
            EXPECT_GT(tt_param_count(tt_random(modes, ranks, seed++)).ratio, 1.0);
        }
    }
}

TEST(TTRandom, DeterministicAndValidated) {
    std::vector<std::size_t> ranks{1, 2, 2, 1};
    auto a = tt_random({3, 3, 3}, ranks, 42);
    auto b = tt_random({3, 3, 3}, ranks, 42);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(a.cores()[k], b.cores()[k]);
    std::vector<std::size_t> bad{2, 2, 2, 1};
    EXPECT_THROW(tt_random({3, 3, 3}, bad, 1), ArgumentError);
    std::vector<std::size_t> short_chain{1, 2, 1};
    EXPECT_THROW(tt_random({3, 3, 3}, short_chain, 1), ArgumentError);
}

TEST(TTRandom, RankOneIsOuterProduct) {
    std::vector<std::size_t> ranks{1, 1, 1};
    auto t = tt_random({3, 4}, ranks, 5);
    auto d = tt_to_dense(t);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(d.at({i, j}), t.cores()[0][i] * t.cores()[1][j]);
}

TEST(TTRandom, ElementVarianceMatchesAnalyticProduct) {
    // Element variance of the chain product: each core contributes var_k = 1/(r_{k-1} n_k)
    // and each interior rank sums r_k independent terms.
    const Shape modes{4, 5, 6};
    std::vector<std::size_t> ranks{1, 3, 2, 1};
    double analytic = 1.0;
    for (std::size_t k = 0; k < 3; ++k) analytic *= 1.0 / static_cast<double>(ranks[k] * modes[k]);
    for (std::size_t k = 1; k < 3; ++k) analytic *= static_cast<double>(ranks[k]);
    double sum = 0.0, sumsq = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 0; count < 10000; ++seed) {
        auto d = tt_to_dense(tt_random(modes, ranks, seed));
        for (double v : d.data()) {
            sum += v;
            sumsq += v * v;
            ++count;
        }
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sumsq / static_cast<double>(count) - mean * mean;
    EXPECT_GT(var, analytic / 3.0);
    EXPECT_LT(var, analytic * 3.0);
}

TEST(RankChain, UniformAndClipped) {
    std::vector<std::size_t> modes{4, 4, 4};
    EXPECT_EQ(uniform_rank_chain(modes, 3), (std::vector<std::size_t>{1, 3, 3, 1}));
    EXPECT_EQ(uniform_rank_chain(modes, 20), (std::vector<std::size_t>{1, 4, 4, 1}));
    std::vector<std::size_t> m2{2, 3, 8};
    EXPECT_EQ(uniform_rank_chain(m2, 7), (std::vector<std::size_t>{1, 2, 6, 1}));
}

TEST(BalancedFactorization, ProductAndBalance) {
    EXPECT_EQ(balanced_factorization(64, 3), (std::vector<std::size_t>{4, 4, 4}));
    EXPECT_EQ(balanced_factorization(12, 3), (std::vector<std::size_t>{2, 2, 3}));
    EXPECT_EQ(balanced_factorization(7, 3), (std::vector<std::size_t>{1, 1, 7}));
    for (std::size_t n : {1ul, 2ul, 30ul, 96ul, 180ul, 1000ul}) {
        for (std::size_t parts = 1; parts <= 5; ++parts) {
            auto f = balanced_factorization(n, parts);
            ASSERT_EQ(f.size(), parts);
            std::size_t p = 1;
            for (auto v : f) p *= v;
            EXPECT_EQ(p, n);
            EXPECT_TRUE(std::is_sorted(f.begin(), f.end()));
        }
    }
}

TEST(CoreFormat, RoundTripIsByteExact) {
    std::vector<std::size_t> ranks{1, 2, 3, 1};
    auto w = tt_matrix_random({2, 3, 2}, {2, 2, 3}, ranks, 77);
    auto bytes = encode_cores(w.cores());
    auto cores = decode_cores(bytes);
    ASSERT_EQ(cores.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(cores[k], w.cores()[k]);
    EXPECT_EQ(encode_cores(cores), bytes);

    const auto dir = std::filesystem::temp_directory_path() / "ttgan_test_tt";
    std::filesystem::create_directories(dir);
    save_tt(dir / "w.ttc", w);
    auto back = load_tt_matrix(dir / "w.ttc");
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(back.cores()[k], w.cores()[k]);
    std::filesystem::remove_all(dir);
}

TEST(CoreFormat, TruncationAndTrailingBytes) {
    std::vector<std::size_t> ranks{1, 2, 1};
    auto t = tt_random({3, 3}, ranks, 1);
    auto bytes = encode_cores(t.cores());
    auto cut = bytes;
    cut.resize(cut.size() - 5);
    EXPECT_THROW(decode_cores(cut), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(decode_cores(extra), FormatError);
    auto bad = bytes;
    bad[3] = '2';
    EXPECT_THROW(decode_cores(bad), FormatError);
}
