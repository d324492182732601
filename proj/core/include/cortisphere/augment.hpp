#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cortisphere/matrix.hpp"
#include "cortisphere/rng.hpp"

namespace cortisphere::augment {

struct MixupConfig {
    double lambda = 0.5; // probability that an image's scans are mixed
    int k = 3;           // mixed samples produced when they are
    void validate() const;
};

struct SimplexWeights {
    double alpha = 1.0;
    double beta = 0.0;
    double gamma = 0.0;
};

// Dirichlet(1, 1, 1): three unit exponentials normalised by their sum.
SimplexWeights sample_simplex_weights(Rng& rng);

// Decision for one image: either K fresh weight triples or the originals.
struct MixupPlan {
    bool mixed = false;
    std::vector<SimplexWeights> weights; // K entries when mixed, empty otherwise
    std::size_t sample_count() const { return mixed ? weights.size() : 3; }
};

MixupPlan plan_mixup(const MixupConfig& config, Rng& rng);

// alpha * x1 + beta * x2 + gamma * x3.
// Equal weights fall through to scan_mean, so K = 1 at (1/3, 1/3, 1/3) is the inference input.
Matrix mix_scans(std::span<const Matrix, 3> scans, const SimplexWeights& w);
// (x1 + x2 + x3) / 3, the inference-time input.
Matrix scan_mean(std::span<const Matrix, 3> scans);

struct MixedSample {
    Matrix value;
    SimplexWeights weights;
    std::int64_t image_index = 0;
};

// With probability lambda: K convex combinations of the three scans.
// Otherwise the three scans themselves, untouched.
std::vector<MixedSample> positive_sample_mixup(std::span<const Matrix, 3> scans, const MixupConfig& config, Rng& rng,
                                               std::int64_t image_index = 0);
// Applies an existing plan; used when several tensors (both hemispheres)
// must share one draw.
std::vector<MixedSample> apply_mixup(std::span<const Matrix, 3> scans, const MixupPlan& plan,
                                     std::int64_t image_index = 0);

// ---- rotation --------------------------------------------------------------

using Rotation = std::array<std::array<double, 3>, 3>;

struct RotationDraw {
    std::array<double, 3> axis{0.0, 0.0, 1.0};
    double theta = 0.0;
    Rotation matrix{};
};

// R = I + sin(theta) K + (1 - cos(theta)) K^2, K the cross-product matrix of
// the unit axis.
Rotation rodrigues(const std::array<double, 3>& axis, double theta);

// Axis from (phi ~ U(0, 2pi), psi ~ U(0, pi)) as
// (sin phi cos psi, sin phi sin psi, cos phi), theta ~ U(0, theta_max).
// The axis law is not area-uniform; it is kept exactly as specified.
RotationDraw draw_rotation(double theta_max, Rng& rng);

// R applied to every row as a column vector (right-hand rule about the axis).
Matrix rotate_rows(const Matrix& coords, const Rotation& r);
Matrix random_rotation(const Matrix& coords, double theta_max, Rng& rng);

} // namespace cortisphere::augment
