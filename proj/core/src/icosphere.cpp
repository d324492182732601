#include "cortisphere/icosphere.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <ostream>
#include <set>

#include "cortisphere/error.hpp"

namespace cortisphere::icosphere {
namespace {

Vec3 normalized(const Vec3& v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

Mesh base_icosahedron() {
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    Mesh m;
    m.level = 0;
    const std::array<Vec3, 12> raw = {{
        {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
        {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
        {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1},
    }};
    for (const auto& v : raw) m.coords.push_back(normalized(v));
    m.faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
        {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
        {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1},
    };
    return m;
}

std::vector<NeighborRow> build_neighbors(const Mesh& m) {
    const std::size_t nv = m.num_vertices();
    // For vertex a in CCW face (a, b, c), the ring steps from b to c.
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> steps(nv);
    for (const auto& f : m.faces) {
        steps[f[0]].emplace_back(f[1], f[2]);
        steps[f[1]].emplace_back(f[2], f[0]);
        steps[f[2]].emplace_back(f[0], f[1]);
    }
    std::vector<NeighborRow> table(nv);
    for (std::size_t i = 0; i < nv; ++i) {
        auto& s = steps[i];
        if (s.size() != 5 && s.size() != 6)
            throw ContractError("vertex " + std::to_string(i) + " has " + std::to_string(s.size()) +
                                " incident faces");
        std::sort(s.begin(), s.end());
        NeighborRow row;
        row.fill(static_cast<std::uint32_t>(i));
        std::uint32_t current = s.front().first; // smallest neighbour starts the ring
        for (std::size_t k = 0; k < s.size(); ++k) {
            row[k + 1] = current;
            auto it = std::lower_bound(s.begin(), s.end(), std::make_pair(current, std::uint32_t{0}));
            if (it == s.end() || it->first != current)
                throw ContractError("open 1-ring at vertex " + std::to_string(i));
            current = it->second;
        }
        if (current != row[1]) throw ContractError("1-ring does not close at vertex " + std::to_string(i));
        table[i] = row;
    }
    return table;
}

Mesh subdivide(const Mesh& coarse) {
    Mesh fine;
    fine.level = coarse.level + 1;
    fine.coords = coarse.coords;

    std::map<EdgeParents, std::uint32_t> midpoint;
    for (const auto& f : coarse.faces) {
        for (int e = 0; e < 3; ++e) {
            const auto a = f[e];
            const auto b = f[(e + 1) % 3];
            midpoint.emplace(EdgeParents{std::min(a, b), std::max(a, b)}, 0);
        }
    }
    // std::map iterates in ascending key order, which fixes the new indices.
    auto next = static_cast<std::uint32_t>(coarse.num_vertices());
    fine.midpoint_parents.reserve(midpoint.size());
    for (auto& [edge, id] : midpoint) {
        id = next++;
        const auto& pa = coarse.coords[edge.first];
        const auto& pb = coarse.coords[edge.second];
        fine.coords.push_back(normalized({pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]}));
        fine.midpoint_parents.push_back(edge);
    }

    auto mid = [&](std::uint32_t a, std::uint32_t b) {
        return midpoint.at(EdgeParents{std::min(a, b), std::max(a, b)});
    };
    fine.faces.reserve(coarse.num_faces() * 4);
    for (const auto& f : coarse.faces) {
        const auto ab = mid(f[0], f[1]);
        const auto bc = mid(f[1], f[2]);
        const auto ca = mid(f[2], f[0]);
        fine.faces.push_back({f[0], ab, ca});
        fine.faces.push_back({f[1], bc, ab});
        fine.faces.push_back({f[2], ca, bc});
        fine.faces.push_back({ab, bc, ca});
    }
    return fine;
}

void check_level(int level) {
    if (level < 0 || level > kMaxLevel)
        throw BoundsError("mesh level " + std::to_string(level) + " outside [0, " +
                          std::to_string(kMaxLevel) + "]");
}

} // namespace

std::size_t Mesh::num_edges() const {
    std::set<EdgeParents> edges;
    for (const auto& f : faces)
        for (int e = 0; e < 3; ++e) {
            const auto a = f[e];
            const auto b = f[(e + 1) % 3];
            edges.emplace(std::min(a, b), std::max(a, b));
        }
    return edges.size();
}

std::size_t Mesh::degree(std::size_t vertex) const {
    const auto& row = neighbors.at(vertex);
    return row[6] == vertex ? 5 : 6;
}

Matrix Mesh::coordinate_matrix() const {
    Matrix out(coords.size(), 3);
    for (std::size_t i = 0; i < coords.size(); ++i)
        for (int k = 0; k < 3; ++k) out(i, k) = coords[i][k];
    return out;
}

Mesh generate(int level) {
    check_level(level);
    Mesh m = base_icosahedron();
    for (int l = 0; l < level; ++l) m = subdivide(m);
    m.neighbors = build_neighbors(m);
    return m;
}

std::shared_ptr<const Mesh> mesh_at(int level) {
    check_level(level);
    static std::mutex lock;
    static std::array<std::shared_ptr<const Mesh>, kMaxLevel + 1> cache;
    std::lock_guard guard(lock);
    auto& slot = cache[static_cast<std::size_t>(level)];
    if (!slot) slot = std::make_shared<const Mesh>(generate(level));
    return slot;
}

const std::vector<NeighborRow>& neighbor_table(const Mesh& mesh) { return mesh.neighbors; }

HierarchyMap hierarchy_map(const Mesh& fine, const Mesh& coarse) {
    if (fine.level != coarse.level + 1)
        throw LevelMismatchError("hierarchy map needs adjacent levels, got fine " +
                                 std::to_string(fine.level) + " and coarse " + std::to_string(coarse.level));
    HierarchyMap map;
    map.fine_level = fine.level;
    map.coarse_level = coarse.level;
    map.parents.reserve(fine.num_vertices());
    for (std::uint32_t i = 0; i < coarse.num_vertices(); ++i) map.parents.emplace_back(i, i);
    for (const auto& p : fine.midpoint_parents) map.parents.push_back(p);
    return map;
}

char hemisphere_tag(Hemisphere h) { return static_cast<char>(h); }

Hemisphere parse_hemisphere(char tag) {
    switch (tag) {
    case 'L': case 'l': return Hemisphere::left;
    case 'R': case 'r': return Hemisphere::right;
    default: throw ParameterError(std::string("unknown hemisphere tag '") + tag + "'");
    }
}

const SparseRows& downsample_operator(int fine_level) {
    check_level(fine_level);
    if (fine_level == 0) throw BoundsError("cannot downsample below level 0");
    static std::mutex lock;
    static std::array<std::unique_ptr<SparseRows>, kMaxLevel + 1> cache;
    std::lock_guard guard(lock);
    auto& slot = cache[static_cast<std::size_t>(fine_level)];
    if (!slot) {
        const auto fine = mesh_at(fine_level);
        auto op = std::make_unique<SparseRows>();
        op->input_rows = fine->num_vertices();
        const std::size_t nc = vertex_count(fine_level - 1);
        for (std::size_t i = 0; i < nc; ++i) {
            const auto& row = fine->neighbors[i];
            const std::size_t distinct = fine->degree(i) + 1;
            std::vector<std::uint32_t> idx(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(distinct));
            op->add_row(idx, std::vector<double>(distinct, 1.0), static_cast<double>(distinct));
        }
        slot = std::move(op);
    }
    return *slot;
}

const SparseRows& upsample_operator(int coarse_level) {
    check_level(coarse_level);
    if (coarse_level >= kMaxLevel) throw BoundsError("cannot upsample above the maximum level");
    static std::mutex lock;
    static std::array<std::unique_ptr<SparseRows>, kMaxLevel + 1> cache;
    std::lock_guard guard(lock);
    auto& slot = cache[static_cast<std::size_t>(coarse_level)];
    if (!slot) {
        const auto fine = mesh_at(coarse_level + 1);
        auto op = std::make_unique<SparseRows>();
        op->input_rows = vertex_count(coarse_level);
        for (std::uint32_t i = 0; i < op->input_rows; ++i) op->add_row({i}, {1.0});
        for (const auto& [a, b] : fine->midpoint_parents) op->add_row({a, b}, {0.5, 0.5});
        slot = std::move(op);
    }
    return *slot;
}

SparseRows resample_operator(int from_level, int to_level) {
    check_level(from_level);
    check_level(to_level);
    SparseRows op = SparseRows::identity(vertex_count(from_level));
    for (int l = from_level; l > to_level; --l) op = SparseRows::compose(op, downsample_operator(l));
    for (int l = from_level; l < to_level; ++l) op = SparseRows::compose(op, upsample_operator(l));
    return op;
}

SphericalSignal resample_signal(const SphericalSignal& signal, int target_level) {
    check_level(signal.level);
    check_level(target_level);
    if (signal.values.rows() != vertex_count(signal.level))
        throw ShapeError("signal has " + std::to_string(signal.values.rows()) + " rows but level " +
                         std::to_string(signal.level) + " has " +
                         std::to_string(vertex_count(signal.level)) + " vertices");
    SphericalSignal out{signal.level, signal.hemisphere, signal.values};
    while (out.level > target_level) {
        out.values = downsample_operator(out.level).apply(out.values);
        --out.level;
    }
    while (out.level < target_level) {
        out.values = upsample_operator(out.level).apply(out.values);
        ++out.level;
    }
    return out;
}

void write_obj(const Mesh& mesh, std::ostream& out) {
    out.precision(17);
    out << "# icosphere level " << mesh.level << '\n';
    for (const auto& v : mesh.coords) out << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
    for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

} // namespace cortisphere::icosphere
