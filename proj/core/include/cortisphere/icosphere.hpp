#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <utility>
#include <vector>

#include "cortisphere/matrix.hpp"
#include "cortisphere/sparse.hpp"

namespace cortisphere::icosphere {

inline constexpr int kMaxLevel = 8;
inline constexpr std::size_t kRingWidth = 7;

constexpr std::size_t vertex_count(int level) { return 10 * (std::size_t{1} << (2 * level)) + 2; }
constexpr std::size_t face_count(int level) { return 20 * (std::size_t{1} << (2 * level)); }
constexpr std::size_t edge_count(int level) { return 30 * (std::size_t{1} << (2 * level)); }

using Vec3 = std::array<double, 3>;
using Face = std::array<std::uint32_t, 3>;
// Slot 0 is the vertex itself, slots 1..6 its 1-ring in counter-clockwise
// order (seen from outside). Pentagon vertices repeat themselves in slot 6.
using NeighborRow = std::array<std::uint32_t, kRingWidth>;
using EdgeParents = std::pair<std::uint32_t, std::uint32_t>;

struct Mesh {
    int level = 0;
    std::vector<Vec3> coords;
    std::vector<Face> faces;
    std::vector<NeighborRow> neighbors;
    // Endpoints of the coarse edge each vertex created at this level bisects,
    // indexed by (vertex - vertex_count(level - 1)). Empty at level 0.
    std::vector<EdgeParents> midpoint_parents;

    std::size_t num_vertices() const noexcept { return coords.size(); }
    std::size_t num_faces() const noexcept { return faces.size(); }
    std::size_t num_edges() const;
    // Number of distinct 1-ring neighbours (5 or 6).
    std::size_t degree(std::size_t vertex) const;
    Matrix coordinate_matrix() const;
};

// Icosahedron subdivided `level` times. Vertices of level n-1 keep their
// indices; midpoints follow in ascending (min, max) edge order.
Mesh generate(int level);

// Shared immutable mesh for a level, generated on first use.
std::shared_ptr<const Mesh> mesh_at(int level);

const std::vector<NeighborRow>& neighbor_table(const Mesh& mesh);

struct HierarchyMap {
    int fine_level = 0;
    int coarse_level = 0;
    // One entry per fine vertex: (i, i) for retained vertices, the two edge
    // endpoints otherwise.
    std::vector<EdgeParents> parents;
};

HierarchyMap hierarchy_map(const Mesh& fine, const Mesh& coarse);

enum class Hemisphere : std::uint8_t { left = 'L', right = 'R' };

char hemisphere_tag(Hemisphere h);
Hemisphere parse_hemisphere(char tag);

struct SphericalSignal {
    int level = 0;
    Hemisphere hemisphere = Hemisphere::left;
    Matrix values; // V x C
};

// One-level pooling: each retained vertex takes the mean over its distinct
// fine-level 1-ring (self included).
const SparseRows& downsample_operator(int fine_level);
// One-level interpolation: retained vertices copy, midpoints average parents.
const SparseRows& upsample_operator(int coarse_level);
// Composition of single-level steps from one level to another.
SparseRows resample_operator(int from_level, int to_level);

SphericalSignal resample_signal(const SphericalSignal& signal, int target_level);

// `v x y z` lines then 1-based `f i j k` lines.
void write_obj(const Mesh& mesh, std::ostream& out);

} // namespace cortisphere::icosphere
