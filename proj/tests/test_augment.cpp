#include <cmath>
#include <numbers>

#include "doctest.h"

#include "cortisphere/augment.hpp"
#include "cortisphere/error.hpp"
#include "cortisphere/icosphere.hpp"

using namespace cortisphere;
using namespace cortisphere::augment;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-2.0, 2.0);
    return m;
}

std::array<Matrix, 3> random_scans(std::size_t r, std::size_t c, Rng& rng) {
    return {random_matrix(r, c, rng), random_matrix(r, c, rng), random_matrix(r, c, rng)};
}

double det3(const Rotation& r) {
    return r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
           r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
}

} // namespace

TEST_CASE("simplex weights: Dirichlet(1,1,1) moments and exact constraints") {
    Rng rng(101);
    const int n = 100000;
    double mean[3] = {}, sq[3] = {};
    for (int i = 0; i < n; ++i) {
        const auto w = sample_simplex_weights(rng);
        const double v[3] = {w.alpha, w.beta, w.gamma};
        for (int k = 0; k < 3; ++k) {
            CHECK_UNARY(v[k] >= 0.0);
            CHECK_UNARY(v[k] <= 1.0);
            mean[k] += v[k];
            sq[k] += v[k] * v[k];
        }
        CHECK(std::abs(v[0] + v[1] + v[2] - 1.0) <= 1e-12);
    }
    for (int k = 0; k < 3; ++k) {
        const double m = mean[k] / n;
        const double var = sq[k] / n - m * m;
        CHECK(std::abs(m - 1.0 / 3.0) < 0.01);
        CHECK(std::abs(var - 1.0 / 18.0) < 0.005);
    }
}

TEST_CASE("non-mixed branch returns the scans bit-identically") {
    Rng rng(1);
    const auto scans = random_scans(10, 2, rng);
    const MixupConfig never{0.0, 3};
    for (int t = 0; t < 20; ++t) {
        const auto out = positive_sample_mixup(scans, never, rng, 7);
        REQUIRE(out.size() == 3);
        for (int s = 0; s < 3; ++s) {
            CHECK(out[s].value == scans[s]);
            CHECK(out[s].image_index == 7);
        }
    }
}

TEST_CASE("mixed branch yields K convex combinations sharing the image index") {
    Rng rng(2);
    const auto scans = random_scans(6, 3, rng);
    const MixupConfig always{1.0, 5};
    const auto out = positive_sample_mixup(scans, always, rng, 4);
    REQUIRE(out.size() == 5);
    for (const auto& s : out) {
        CHECK(s.image_index == 4);
        CHECK(s.value.same_shape(scans[0]));
        const auto& w = s.weights;
        for (std::size_t i = 0; i < s.value.size(); ++i)
            CHECK(s.value[i] ==
                  doctest::Approx(w.alpha * scans[0][i] + w.beta * scans[1][i] + w.gamma * scans[2][i]).epsilon(1e-14));
    }
}

TEST_CASE("mixing frequency follows lambda") {
    Rng rng(3);
    const MixupConfig half{0.5, 3};
    int mixed = 0;
    for (int i = 0; i < 20000; ++i) mixed += plan_mixup(half, rng).mixed;
    CHECK(std::abs(mixed / 20000.0 - 0.5) < 0.015);
}

TEST_CASE("forced weights: simplex vertex and the three-way mean") {
    Rng rng(4);
    const auto scans = random_scans(8, 2, rng);
    CHECK(mix_scans(scans, {1.0, 0.0, 0.0}) == scans[0]);
    CHECK(mix_scans(scans, {0.0, 0.0, 1.0}) == scans[2]);
    MixupPlan plan;
    plan.mixed = true;
    plan.weights = {{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}};
    const auto out = apply_mixup(scans, plan);
    REQUIRE(out.size() == 1);
    const Matrix mean = mix_scans(scans, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
    CHECK(out[0].value == mean);
    for (std::size_t i = 0; i < mean.size(); ++i)
        CHECK(mean[i] == (scans[0][i] + scans[1][i] + scans[2][i]) / 3.0);
    CHECK(scan_mean(scans) == mean);
}

TEST_CASE("mixup commutes with linear maps") {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const auto scans = random_scans(7, 4, rng);
        const Matrix map = random_matrix(4, 3, rng);
        const auto w = sample_simplex_weights(rng);
        const Matrix lhs = kernels::matmul(mix_scans(scans, w), map);
        const std::array<Matrix, 3> mapped{kernels::matmul(scans[0], map), kernels::matmul(scans[1], map),
                                           kernels::matmul(scans[2], map)};
        const Matrix rhs = mix_scans(mapped, w);
        for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - rhs[i]) < 1e-12);
    }
}

TEST_CASE("identical scans make every mixed sample equal the scan") {
    Rng rng(6);
    const Matrix x = random_matrix(5, 2, rng);
    const std::array<Matrix, 3> scans{x, x, x};
    for (const auto& s : positive_sample_mixup(scans, {1.0, 4}, rng))
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(s.value[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("mixup errors") {
    Rng rng(7);
    const std::array<Matrix, 3> bad{Matrix(2, 2), Matrix(2, 2), Matrix(3, 2)};
    CHECK_THROWS_AS(positive_sample_mixup(bad, {1.0, 3}, rng), ShapeError);
    CHECK_THROWS_AS(MixupConfig({1.5, 3}).validate(), ConfigError);
    CHECK_THROWS_AS(MixupConfig({0.5, 0}).validate(), ConfigError);
}

TEST_CASE("rotations are orthogonal with unit determinant over many draws") {
    Rng rng(8);
    const Matrix coords = icosphere::mesh_at(1)->coordinate_matrix();
    double worst_orth = 0.0, worst_det = 0.0, worst_norm = 0.0;
    for (int t = 0; t < 10000; ++t) {
        const auto d = draw_rotation(std::numbers::pi, rng);
        const auto& r = d.matrix;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += r[k][i] * r[k][j];
                worst_orth = std::max(worst_orth, std::abs(s - (i == j ? 1.0 : 0.0)));
            }
        worst_det = std::max(worst_det, std::abs(det3(r) - 1.0));
        if (t % 100 == 0) {
            const Matrix moved = rotate_rows(coords, r);
            for (std::size_t v = 0; v < coords.rows(); ++v) {
                const double n0 = std::hypot(coords(v, 0), coords(v, 1), coords(v, 2));
                const double n1 = std::hypot(moved(v, 0), moved(v, 1), moved(v, 2));
                worst_norm = std::max(worst_norm, std::abs(n0 - n1));
            }
        }
    }
    CHECK(worst_orth < 1e-12);
    CHECK(worst_det < 1e-12);
    CHECK(worst_norm < 1e-9);
}

TEST_CASE("zero maximum angle leaves coordinates untouched") {
    Rng rng(9);
    const Matrix coords = icosphere::mesh_at(2)->coordinate_matrix();
    CHECK(random_rotation(coords, 0.0, rng) == coords);
    CHECK_THROWS_AS(random_rotation(coords, -0.1, rng), ParameterError);
}

TEST_CASE("quarter turn about z maps x to y") {
    const auto r = rodrigues({0.0, 0.0, 1.0}, std::numbers::pi / 2.0);
    const Matrix out = rotate_rows(Matrix::from_rows({{1.0, 0.0, 0.0}}), r);
    CHECK(std::abs(out(0, 0)) < 1e-12);
    CHECK(std::abs(out(0, 1) - 1.0) < 1e-12);
    CHECK(std::abs(out(0, 2)) < 1e-12);
}

TEST_CASE("five-degree rotations move unit vectors by at most the chord bound") {
    Rng rng(10);
    const Matrix coords = icosphere::mesh_at(2)->coordinate_matrix();
    const double theta_max = 5.0 * std::numbers::pi / 180.0;
    const double bound = 2.0 * std::sin(theta_max / 2.0) + 1e-12;
    for (int t = 0; t < 200; ++t) {
        const Matrix moved = random_rotation(coords, theta_max, rng);
        for (std::size_t v = 0; v < coords.rows(); ++v) {
            const double dx = moved(v, 0) - coords(v, 0), dy = moved(v, 1) - coords(v, 1),
                         dz = moved(v, 2) - coords(v, 2);
            CHECK(std::sqrt(dx * dx + dy * dy + dz * dz) <= bound);
        }
    }
}

TEST_CASE("axis law is the printed angle parameterisation") {
    Rng rng(11);
    for (int t = 0; t < 1000; ++t) {
        const auto d = draw_rotation(0.3, rng);
        CHECK(std::abs(std::hypot(d.axis[0], d.axis[1], d.axis[2]) - 1.0) < 1e-12);
        CHECK_UNARY(d.theta >= 0.0);
        CHECK_UNARY(d.theta <= 0.3);
        const auto r = rodrigues(d.axis, d.theta);
        CHECK(r == d.matrix);
    }
    // z = cos(phi) with phi uniform on [0, 2pi): E[z^2] = 1/2 rather than the area-uniform 1/3
    double zz = 0;
    const int n = 50000;
    for (int t = 0; t < n; ++t) {
        const auto d = draw_rotation(0.1, rng);
        zz += d.axis[2] * d.axis[2];
    }
    CHECK(std::abs(zz / n - 0.5) < 0.01);
}
