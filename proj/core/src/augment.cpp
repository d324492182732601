#include "cortisphere/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cortisphere/error.hpp"

namespace cortisphere::augment {

void MixupConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ConfigError("mixup lambda must lie in [0, 1], got " + std::to_string(lambda));
    if (k < 1) throw ConfigError("mixup K must be at least 1, got " + std::to_string(k));
}

SimplexWeights sample_simplex_weights(Rng& rng) {
    const double a = rng.exponential();
    const double b = rng.exponential();
    const double c = rng.exponential();
    const double s = a + b + c;
    SimplexWeights w{a / s, b / s, 0.0};
    // Closing the simplex by subtraction rather than dividing the third draw
    // keeps alpha + beta + gamma at 1 to the last bit in practice.
    w.gamma = std::max(0.0, 1.0 - (w.alpha + w.beta));
    return w;
}

MixupPlan plan_mixup(const MixupConfig& config, Rng& rng) {
    config.validate();
    MixupPlan plan;
    const double t = rng.uniform();
    if (t < config.lambda) {
        plan.mixed = true;
        for (int k = 0; k < config.k; ++k) plan.weights.push_back(sample_simplex_weights(rng));
    }
    return plan;
}

namespace {

void require_same_shapes(std::span<const Matrix, 3> scans) {
    if (!scans[0].same_shape(scans[1]) || !scans[0].same_shape(scans[2]))
        throw ShapeError("mixup scans differ in shape: " + scans[0].shape_string() + ", " +
                         scans[1].shape_string() + ", " + scans[2].shape_string());
}

} // namespace

Matrix scan_mean(std::span<const Matrix, 3> scans) {
    require_same_shapes(scans);
    Matrix out(scans[0].rows(), scans[0].cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (scans[0][i] + scans[1][i] + scans[2][i]) / 3.0;
    return out;
}

Matrix mix_scans(std::span<const Matrix, 3> scans, const SimplexWeights& w) {
    if (w.alpha == w.beta && w.beta == w.gamma) return scan_mean(scans);
    require_same_shapes(scans);
    Matrix out(scans[0].rows(), scans[0].cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = w.alpha * scans[0][i] + w.beta * scans[1][i] + w.gamma * scans[2][i];
    return out;
}

std::vector<MixedSample> apply_mixup(std::span<const Matrix, 3> scans, const MixupPlan& plan,
                                     std::int64_t image_index) {
    require_same_shapes(scans);
    std::vector<MixedSample> out;
    if (plan.mixed) {
        for (const auto& w : plan.weights) out.push_back({mix_scans(scans, w), w, image_index});
    } else {
        out.push_back({scans[0], {1.0, 0.0, 0.0}, image_index});
        out.push_back({scans[1], {0.0, 1.0, 0.0}, image_index});
        out.push_back({scans[2], {0.0, 0.0, 1.0}, image_index});
    }
    return out;
}

std::vector<MixedSample> positive_sample_mixup(std::span<const Matrix, 3> scans, const MixupConfig& config, Rng& rng,
                                               std::int64_t image_index) {
    require_same_shapes(scans);
    return apply_mixup(scans, plan_mixup(config, rng), image_index);
}

Rotation rodrigues(const std::array<double, 3>& v, double theta) {
    const Rotation k = {{{0.0, -v[2], v[1]}, {v[2], 0.0, -v[0]}, {-v[1], v[0], 0.0}}};
    Rotation k2{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int t = 0; t < 3; ++t) k2[i][j] += k[i][t] * k[t][j];
    const double s = std::sin(theta);
    const double c = 1.0 - std::cos(theta);
    Rotation r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[i][j] = (i == j ? 1.0 : 0.0) + s * k[i][j] + c * k2[i][j];
    return r;
}

RotationDraw draw_rotation(double theta_max, Rng& rng) {
    if (!(theta_max >= 0.0)) throw ParameterError("theta_max must be non-negative");
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double psi = rng.uniform(0.0, std::numbers::pi);
    RotationDraw d;
    d.axis = {std::sin(phi) * std::cos(psi), std::sin(phi) * std::sin(psi), std::cos(phi)};
    d.theta = rng.uniform(0.0, theta_max);
    d.matrix = rodrigues(d.axis, d.theta);
    return d;
}

Matrix rotate_rows(const Matrix& coords, const Rotation& r) {
    if (coords.cols() != 3) throw ShapeError("rotation expects n x 3 coordinates, got " + coords.shape_string());
    Matrix out(coords.rows(), 3);
    for (std::size_t i = 0; i < coords.rows(); ++i)
        for (int j = 0; j < 3; ++j)
            out(i, j) = r[j][0] * coords(i, 0) + r[j][1] * coords(i, 1) + r[j][2] * coords(i, 2);
    return out;
}

Matrix random_rotation(const Matrix& coords, double theta_max, Rng& rng) {
    for (double v : coords.values())
        if (!std::isfinite(v)) throw ParameterError("rotation input contains non-finite coordinates");
    const RotationDraw d = draw_rotation(theta_max, rng);
    if (d.theta == 0.0) return coords;
    return rotate_rows(coords, d.matrix);
}

} // namespace cortisphere::augment
