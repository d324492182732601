#include <cmath>
#include <memory>

#include "doctest.h"

#include "cortisphere/error.hpp"
#include "cortisphere/icosphere.hpp"
#include "cortisphere/numerics.hpp"
#include "cortisphere/rng.hpp"

using namespace cortisphere;
using namespace cortisphere::num;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

// Contract any output to a scalar with fixed random weights so every output
// entry carries a distinct sensitivity.
Var contract(Var y, std::uint64_t seed) {
    Rng rng(seed);
    Matrix w = random_matrix(y.rows(), y.cols(), rng);
    return masked_sum(y, w);
}

FiniteDifferenceReport check(const Program& p, const ParameterSet& ps, double tol = 1e-6) {
    FiniteDifferenceOptions o;
    o.tolerance = tol;
    return finite_difference_check(p, ps, o);
}

} // namespace

TEST_CASE("identity program records no compute nodes") {
    ParameterSet ps;
    ps.add("x", Matrix::from_rows({{1, 2}, {3, 4}}));
    const Trace t = trace_forward([](Tape&, const BoundParameters& p) { return p["x"]; }, ps);
    CHECK(t.output.value() == ps.at("x"));
    CHECK(t.tape->compute_node_count() == 0);
}

TEST_CASE("matmul on the tape equals a hand computation and rejects bad shapes") {
    Tape tape;
    const Var a = tape.constant(Matrix::from_rows({{1, 2, 3}, {4, 5, 6}}));
    const Var b = tape.constant(Matrix::from_rows({{7, 8}, {9, 10}, {11, 12}}));
    CHECK(matmul(a, b).value() == Matrix::from_rows({{58, 64}, {139, 154}}));
    const Var bad = tape.constant(Matrix(2, 3));
    CHECK_THROWS_AS(matmul(a, bad), ShapeError);
    try {
        matmul(a, bad);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("node") != std::string::npos);
    }
}

TEST_CASE("scale backpropagates three times the seed gradient") {
    Tape tape;
    const Var x = tape.parameter("x", Matrix::from_rows({{1, -2}}));
    const Var y = scale(x, 3.0);
    const Matrix seed = Matrix::from_rows({{0.5, 2.0}});
    const Gradients g = tape.backpropagate(y, seed);
    CHECK(g.at("x") == Matrix::from_rows({{1.5, 6.0}}));
    CHECK_THROWS_AS(tape.backpropagate(y, Matrix(2, 2)), ShapeError);
}

TEST_CASE("mse at its minimum has zero gradient and unused parameters get zeros") {
    Tape tape;
    const Matrix t = Matrix::from_rows({{1, 2}, {3, 4}});
    const Var x = tape.parameter("x", t);
    tape.parameter("unused", Matrix(3, 1, 7.0));
    const Var loss = mse(x, tape.constant(t));
    CHECK(loss.value()(0, 0) == 0.0);
    const Gradients g = tape.backpropagate(loss);
    for (double v : g.at("x").values()) CHECK(v == 0.0);
    CHECK(g.at("unused") == Matrix(3, 1));
}

TEST_CASE("finite differences: exact on a linear map, non-scalar programs rejected") {
    Rng rng(1);
    ParameterSet ps;
    ps.add("w", random_matrix(3, 4, rng));
    const Matrix x = random_matrix(5, 3, rng);
    const Program linear = [x](Tape& t, const BoundParameters& p) {
        return contract(matmul(t.constant(x), p["w"]), 17);
    };
    FiniteDifferenceOptions wide;
    wide.step = 1e-2; // any step is exact for a linear map; a wide one keeps rounding out
    const auto report = finite_difference_check(linear, ps, wide);
    CHECK(report.max_rel_error < 1e-10);
    CHECK(report.passed);
    CHECK(report.checked == 12);
    const Program matrix_out = [x](Tape& t, const BoundParameters& p) { return matmul(t.constant(x), p["w"]); };
    CHECK_THROWS_AS(finite_difference_check(matrix_out, ps), ContractError);
}

TEST_CASE("finite differences flag relu kinks at exact zeros") {
    ParameterSet ps;
    ps.add("x", Matrix::from_rows({{0.0, 1.0, -1.0, 0.0, 2.0}}));
    const Program p = [](Tape&, const BoundParameters& b) { return contract(relu(b["x"]), 3); };
    const auto report = check(p, ps);
    CHECK(report.kink_excluded == 2);
    CHECK(report.checked == 3);
    CHECK(report.passed);
    // subgradient zero at the kink
    Tape tape;
    const Var x = tape.parameter("x", ps.at("x"));
    const Gradients g = tape.backpropagate(row_sum(relu(x)));
    CHECK(g.at("x") == Matrix::from_rows({{0, 1, 0, 0, 1}}));
}

TEST_CASE("every operation passes a finite-difference check away from kinks") {
    Rng rng(7);
    const auto& ring = icosphere::mesh_at(1)->neighbors;
    const auto pool = std::make_shared<const SparseRows>(icosphere::downsample_operator(1));
    Matrix mask(4, 5);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3 == 0) ? 0.0 : 1.0;
    Matrix row_weights(4, 1);
    row_weights(0, 0) = 1.0;
    row_weights(2, 0) = 1.0;

    struct Case {
        const char* name;
        std::function<Var(Tape&, Var, Var)> body;
        std::size_t ar, ac, br, bc;
    };
    const std::vector<Case> cases = {
        {"matmul", [](Tape&, Var a, Var b) { return matmul(a, b); }, 4, 5, 5, 3},
        {"transpose", [](Tape&, Var a, Var) { return transpose(a); }, 4, 5, 1, 1},
        {"add", [](Tape&, Var a, Var b) { return add(a, b); }, 4, 5, 4, 5},
        {"subtract", [](Tape&, Var a, Var b) { return subtract(a, b); }, 4, 5, 4, 5},
        {"multiply", [](Tape&, Var a, Var b) { return multiply(a, b); }, 4, 5, 4, 5},
        {"scale", [](Tape&, Var a, Var) { return scale(a, -2.5); }, 4, 5, 1, 1},
        {"offset", [](Tape&, Var a, Var) { return multiply(offset(a, 0.7), a); }, 4, 5, 1, 1},
        {"add_row_bias", [](Tape&, Var a, Var b) { return add_row_bias(a, b); }, 4, 5, 1, 5},
        {"relu", [](Tape&, Var a, Var) { return relu(a); }, 4, 5, 1, 1},
        {"ring_gather", [&ring](Tape&, Var a, Var) { return ring_gather(a, ring); }, 42, 2, 1, 1},
        {"sparse_combine", [pool](Tape&, Var a, Var) { return sparse_combine(a, pool); }, 42, 2, 1, 1},
        {"row_sum", [](Tape&, Var a, Var) { return row_sum(a); }, 4, 5, 1, 1},
        {"row_mean_reduce", [](Tape&, Var a, Var) { return row_mean_reduce(a); }, 4, 5, 1, 1},
        {"mean_all", [](Tape&, Var a, Var) { return mean_all(a); }, 4, 5, 1, 1},
        {"masked_sum", [mask](Tape&, Var a, Var) { return masked_sum(a, mask); }, 4, 5, 1, 1},
        {"softmax_row", [](Tape&, Var a, Var) { return softmax_row(a); }, 4, 5, 1, 1},
        {"log_sum_exp_row", [](Tape&, Var a, Var) { return log_sum_exp_row(a); }, 4, 5, 1, 1},
        {"log_sum_exp_row_masked", [mask](Tape&, Var a, Var) { return log_sum_exp_row(a, mask); }, 4, 5, 1, 1},
        {"l2_normalize_row", [](Tape&, Var a, Var) { return l2_normalize_row(a); }, 4, 5, 1, 1},
        {"clamp", [](Tape&, Var a, Var) { return clamp(a, -0.5, 0.5); }, 4, 5, 1, 1},
        {"mse", [](Tape&, Var a, Var b) { return mse(a, b); }, 4, 5, 4, 5},
        {"mse_rows", [row_weights](Tape&, Var a, Var b) { return mse(a, b, row_weights); }, 4, 5, 4, 5},
        {"mse_full", [mask](Tape&, Var a, Var b) { return mse(a, b, mask); }, 4, 5, 4, 5},
        {"l1", [](Tape&, Var a, Var b) { return l1(a, b); }, 4, 5, 4, 5},
        {"concat_channels", [](Tape&, Var a, Var b) { return concat_channels(a, b); }, 4, 5, 4, 2},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        ParameterSet ps;
        ps.add("a", random_matrix(c.ar, c.ac, rng));
        ps.add("b", random_matrix(c.br, c.bc, rng));
        const auto body = c.body;
        const Program p = [body](Tape& t, const BoundParameters& b) {
            Var y = body(t, b["a"], b["b"]);
            return y.rows() == 1 && y.cols() == 1 ? y : contract(y, 99);
        };
        const auto report = check(p, ps);
        CHECK(report.passed);
        CHECK(report.max_rel_error < 1e-6);
        CHECK(report.checked > 0);
    }
}

TEST_CASE("ring_gather lays neighbours side by side and scatters back") {
    const auto& ring = icosphere::mesh_at(0)->neighbors;
    Matrix x(12, 2);
    for (std::size_t i = 0; i < 12; ++i) {
        x(i, 0) = static_cast<double>(i);
        x(i, 1) = -static_cast<double>(i);
    }
    Tape tape;
    const Var v = tape.parameter("x", x);
    const Var g = ring_gather(v, ring);
    REQUIRE(g.cols() == 14);
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t k = 0; k < 7; ++k) {
            CHECK(g.value()(i, 2 * k) == static_cast<double>(ring[i][k]));
            CHECK(g.value()(i, 2 * k + 1) == -static_cast<double>(ring[i][k]));
        }
    // adjoint of all-ones: each vertex receives one count per appearance
    const Gradients grad = tape.backpropagate(g, Matrix(12, 14, 1.0));
    std::vector<double> appearances(12, 0.0);
    for (const auto& row : ring)
        for (auto j : row) appearances[j] += 1.0;
    for (std::size_t i = 0; i < 12; ++i) CHECK(grad.at("x")(i, 0) == appearances[i]);
}

TEST_CASE("adjoints are linear: gradient of a sum equals the sum of gradients") {
    Rng rng(21);
    ParameterSet ps;
    ps.add("w", random_matrix(3, 3, rng));
    const Matrix x = random_matrix(4, 3, rng);
    const Matrix t = random_matrix(4, 3, rng);
    auto f1 = [&](Tape& tape, Var w) { return mse(matmul(tape.constant(x), w), tape.constant(t)); };
    auto f2 = [&](Tape& tape, Var w) { return log_sum_exp_row(matmul(tape.constant(x), w)); };
    Tape a, b, c;
    const Gradients g1 = a.backpropagate(f1(a, a.bind(ps)["w"]));
    const Gradients g2 = b.backpropagate(row_sum(transpose(f2(b, b.bind(ps)["w"]))));
    const auto bound = c.bind(ps);
    const Gradients g12 = c.backpropagate(add(f1(c, bound["w"]), row_sum(transpose(f2(c, bound["w"])))));
    for (std::size_t i = 0; i < 9; ++i)
        CHECK(g12.at("w")[i] == doctest::Approx(g1.at("w")[i] + g2.at("w")[i]).epsilon(1e-14));
}

TEST_CASE("taped results equal direct evaluation and are deterministic") {
    Rng rng(4);
    const Matrix a = random_matrix(6, 8, rng);
    const Matrix b = random_matrix(8, 5, rng);
    Tape t1, t2;
    const Matrix y1 = log_sum_exp_row(matmul(t1.constant(a), t1.constant(b))).value();
    const Matrix y2 = log_sum_exp_row(matmul(t2.constant(a), t2.constant(b))).value();
    CHECK(y1 == y2);
    const Matrix ab = kernels::matmul(a, b);
    for (std::size_t r = 0; r < 6; ++r) {
        double m = ab(r, 0);
        for (std::size_t c = 1; c < 5; ++c) m = std::max(m, ab(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) s += std::exp(ab(r, c) - m);
        CHECK(y1(r, 0) == doctest::Approx(m + std::log(s)).epsilon(1e-14));
    }
}

TEST_CASE("mixing tapes is a contract violation") {
    Tape a, b;
    CHECK_THROWS_AS(add(a.constant(Matrix(1, 1)), b.constant(Matrix(1, 1))), ContractError);
}

TEST_CASE("parameter sets keep insertion order and reject duplicates") {
    ParameterSet ps;
    ps.add("b", Matrix(1, 2));
    ps.add("a", Matrix(3, 1));
    CHECK(ps.begin()->first == "b");
    CHECK(ps.scalar_count() == 5);
    CHECK_THROWS(ps.add("a", Matrix(1, 1)));
    CHECK_THROWS(ps.at("zzz"));
    const ParameterSet z = ps.zeros_like();
    CHECK(z.at("a") == Matrix(3, 1));
}
