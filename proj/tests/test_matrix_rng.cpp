#include <cmath>
#include <set>

#include "doctest.h"

#include "cortisphere/error.hpp"
#include "cortisphere/matrix.hpp"
#include "cortisphere/rng.hpp"
#include "cortisphere/sparse.hpp"

using namespace cortisphere;

namespace {

Matrix naive_product(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
    return m;
}

} // namespace

TEST_CASE("matmul variants agree with a triple loop for small and large shapes") {
    Rng rng(3);
    for (auto [m, k, n] : {std::array<std::size_t, 3>{2, 3, 4}, {40, 56, 8}, {7, 1, 9}, {64, 64, 64}}) {
        const Matrix a = random_matrix(m, k, rng);
        const Matrix b = random_matrix(k, n, rng);
        const Matrix ref = naive_product(a, b);
        const Matrix c1 = kernels::matmul(a, b);
        const Matrix c2 = kernels::matmul_nt(a, b.transposed());
        const Matrix c3 = kernels::matmul_tn(a.transposed(), b);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(c1[i] == doctest::Approx(ref[i]).epsilon(1e-12));
            CHECK(c2[i] == doctest::Approx(ref[i]).epsilon(1e-12));
            CHECK(c3[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("matmul variants agree with a triple loop across a shape sweep") {
    // covers the sizes the tokenizer and predictor hit, where one BLAS build misbehaved
    Rng rng(4);
    const std::size_t sizes[] = {1, 3, 12, 16, 32, 42, 112, 162, 224, 257};
    double worst = 0;
    for (std::size_t m : sizes)
        for (std::size_t n : sizes)
            for (std::size_t k : {std::size_t{4}, std::size_t{16}, std::size_t{33}, std::size_t{224}}) {
                const Matrix a = random_matrix(m, k, rng);
                const Matrix b = random_matrix(k, n, rng);
                const Matrix ref = naive_product(a, b);
                const Matrix c1 = kernels::matmul(a, b);
                const Matrix c2 = kernels::matmul_nt(a, b.transposed());
                const Matrix c3 = kernels::matmul_tn(a.transposed(), b);
                for (std::size_t i = 0; i < ref.size(); ++i)
                    worst = std::max({worst, std::abs(c1[i] - ref[i]), std::abs(c2[i] - ref[i]),
                                      std::abs(c3[i] - ref[i])});
            }
    CHECK(worst < 1e-11);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    CHECK_THROWS_AS(kernels::matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
    CHECK_THROWS_AS(kernels::matmul_nt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
    CHECK_THROWS_AS(kernels::matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("rng streams are reproducible and splits are independent of parent progress") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a() == b());
    Rng parent(9);
    const Rng child_before = parent.split("x");
    for (int i = 0; i < 10; ++i) parent();
    Rng child_after = parent.split("x");
    Rng cb = child_before;
    CHECK(cb() == child_after());
    CHECK(Rng(1).split("a").key() != Rng(1).split("b").key());
    CHECK(Rng(1).split(0).key() != Rng(1).split(1).key());
}

TEST_CASE("rng distributions have the expected moments") {
    Rng rng(11);
    const int n = 200000;
    double su = 0, se = 0, sn = 0, sn2 = 0, sb = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK_UNARY(u >= 0.0);
        CHECK_UNARY(u < 1.0);
        su += u;
        se += rng.exponential();
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
        sb += rng.beta(0.3, 0.3);
    }
    CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(se / n == doctest::Approx(1.0).epsilon(0.01));
    CHECK(std::abs(sn / n) < 0.01);
    CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));
    CHECK(sb / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("below covers its range uniformly") {
    Rng rng(5);
    std::array<int, 7> counts{};
    for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("sparse rows apply, transpose and compose consistently") {
    SparseRows op;
    op.input_rows = 3;
    op.add_row({0, 2}, {0.5, 0.5});
    op.add_row({1}, {2.0});
    const Matrix x = Matrix::from_rows({{1, 10}, {2, 20}, {3, 30}});
    const Matrix y = op.apply(x);
    CHECK(y == Matrix::from_rows({{2, 20}, {4, 40}}));
    // <op x, g> == <x, op^T g>
    const Matrix g = Matrix::from_rows({{1, -1}, {0.5, 2}});
    const Matrix xt = op.apply_transpose(g);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * xt[i];
    CHECK(lhs == doctest::Approx(rhs));
    const SparseRows sel = SparseRows::select(2, {1});
    const SparseRows both = SparseRows::compose(op, sel);
    CHECK(both.apply(x) == Matrix::from_rows({{4, 40}}));
    CHECK(SparseRows::identity(3).apply(x) == x);
    CHECK_THROWS_AS(op.add_row({5}, {1.0}), BoundsError);
}
