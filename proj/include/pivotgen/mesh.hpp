#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pivotgen/common.hpp"
#include "pivotgen/rng.hpp"

namespace pivotgen {

inline constexpr int kGridBits = 7;
inline constexpr int kGridSize = 1 << kGridBits;  // 128 bins per axis

using Vec3 = std::array<double, 3>;
using GridPoint = std::array<int, 3>;  // x,y,z bins in [0,127]
using Triangle = std::array<int, 3>;

// Vertices in model units; faces are polygons (>=3 vertices) until triangulated.
struct RawMesh {
    std::vector<Vec3> vertices;
    std::vector<std::vector<int>> faces;
};

// The canonical geometric object: unique 7-bit grid vertices + triangle faces.
struct QuantizedMesh {
    std::vector<GridPoint> vertices;
    std::vector<Triangle> faces;

    bool operator==(const QuantizedMesh& o) const {
        return vertices == o.vertices && faces == o.faces;
    }
};

// Flat (x,y,z)x3 coordinate list, 9 ints per face.
struct FaceSequence {
    std::vector<int> coords;

    int face_count() const { return static_cast<int>(coords.size() / 9); }
};

// (z,y,x) lexicographic key used for the canonical vertex order.
inline bool zyx_less(const GridPoint& a, const GridPoint& b) {
    if (a[2] != b[2]) return a[2] < b[2];
    if (a[1] != b[1]) return a[1] < b[1];
    return a[0] < b[0];
}

inline Vec3 dequantize_point(const GridPoint& p) {
    return {(p[0] + 0.5) / kGridSize - 0.5,
            (p[1] + 0.5) / kGridSize - 0.5,
            (p[2] + 0.5) / kGridSize - 0.5};
}

inline int quantize_coord(double c) {
    int bin = static_cast<int>(std::floor((c + 0.5) * kGridSize));
    return std::clamp(bin, 0, kGridSize - 1);
}

// Fan triangulation anchored at each polygon's first vertex. Triangles pass
// through unchanged; the vertex list is untouched.
inline RawMesh triangulate(const RawMesh& mesh) {
    RawMesh out;
    out.vertices = mesh.vertices;
    for (const auto& face : mesh.faces) {
        if (face.size() < 3) throw Error("triangulate: face with fewer than 3 vertices");
        for (std::size_t i = 1; i + 1 < face.size(); ++i) {
            out.faces.push_back({face[0], face[i], face[i + 1]});
        }
    }
    return out;
}

// Centers the bounding box at the origin and scales the longest edge to 1,
// so every coordinate lands in [-0.5, 0.5].
inline RawMesh normalize(const RawMesh& mesh) {
    if (mesh.vertices.empty()) throw Error("normalize: empty vertex list");
    Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
    for (const auto& v : mesh.vertices) {
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], v[a]);
            hi[a] = std::max(hi[a], v[a]);
        }
    }
    double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    if (extent <= 0.0) throw Error("normalize: degenerate bounding box");
    RawMesh out;
    out.faces = mesh.faces;
    out.vertices.reserve(mesh.vertices.size());
    for (const auto& v : mesh.vertices) {
        Vec3 c;
        for (int a = 0; a < 3; ++a) c[a] = (v[a] - 0.5 * (lo[a] + hi[a])) / extent;
        out.vertices.push_back(c);
    }
    return out;
}

// Per-axis random scale in [0.95, 1.05] then shift in [-0.01, 0.01], clamped
// back to the normalized cube. Draw order: scale x,y,z then shift x,y,z.
inline RawMesh augment(const RawMesh& mesh, Rng& rng) {
    Vec3 scale, shift;
    for (int a = 0; a < 3; ++a) scale[a] = rng.uniform(0.95, 1.05);
    for (int a = 0; a < 3; ++a) shift[a] = rng.uniform(-0.01, 0.01);
    RawMesh out;
    out.faces = mesh.faces;
    out.vertices.reserve(mesh.vertices.size());
    for (const auto& v : mesh.vertices) {
        Vec3 c;
        for (int a = 0; a < 3; ++a) c[a] = std::clamp(v[a] * scale[a] + shift[a], -0.5, 0.5);
        out.vertices.push_back(c);
    }
    return out;
}

namespace detail {

// Drops vertices no face references and reindexes. Keeps vertex order.
inline void drop_unreferenced(std::vector<GridPoint>& vertices, std::vector<Triangle>& faces) {
    std::vector<int> remap(vertices.size(), -1);
    for (const auto& f : faces)
        for (int idx : f) remap[idx] = 0;
    std::vector<GridPoint> kept;
    kept.reserve(vertices.size());
    for (std::size_t i = 0; i < vertices.size(); ++i) {
        if (remap[i] == 0) {
            remap[i] = static_cast<int>(kept.size());
            kept.push_back(vertices[i]);
        }
    }
    for (auto& f : faces)
        for (int& idx : f) idx = remap[idx];
    vertices = std::move(kept);
}

}  // namespace detail

struct QuantizeResult {
    QuantizedMesh mesh;
    int dropped_faces = 0;  // faces that collapsed when vertices merged
};

// 7-bit floor binning with clamping. Vertices sharing a bin are merged and
// faces that collapse to fewer than 3 distinct vertices are dropped.
inline QuantizeResult quantize(const RawMesh& mesh) {
    QuantizeResult res;
    std::map<GridPoint, int> bin_index;
    std::vector<int> vertex_map(mesh.vertices.size());
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        GridPoint p = {quantize_coord(mesh.vertices[i][0]),
                       quantize_coord(mesh.vertices[i][1]),
                       quantize_coord(mesh.vertices[i][2])};
        auto [it, inserted] = bin_index.emplace(p, static_cast<int>(res.mesh.vertices.size()));
        if (inserted) res.mesh.vertices.push_back(p);
        vertex_map[i] = it->second;
    }
    for (const auto& face : mesh.faces) {
        if (face.size() != 3) throw Error("quantize: non-triangular face (triangulate first)");
        Triangle t = {vertex_map[face[0]], vertex_map[face[1]], vertex_map[face[2]]};
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
            ++res.dropped_faces;
            continue;
        }
        res.mesh.faces.push_back(t);
    }
    if (res.mesh.faces.empty()) throw Error("mesh collapsed under quantization");
    detail::drop_unreferenced(res.mesh.vertices, res.mesh.faces);
    return res;
}

// Bin centers; inverse of quantize on valid QuantizedMesh.
inline RawMesh dequantize(const QuantizedMesh& mesh) {
    RawMesh out;
    out.vertices.reserve(mesh.vertices.size());
    for (const auto& p : mesh.vertices) out.vertices.push_back(dequantize_point(p));
    out.faces.reserve(mesh.faces.size());
    for (const auto& f : mesh.faces) out.faces.push_back({f[0], f[1], f[2]});
    return out;
}

// Deterministic canonical form: vertices sorted by (z,y,x), faces rotated so
// the lowest vertex index is first (winding preserved), then sorted by index
// tuple with exact duplicates removed. Idempotent and invariant under any
// consistent relabeling of the input.
inline QuantizedMesh canonicalize(const QuantizedMesh& mesh) {
    QuantizedMesh out = mesh;
    detail::drop_unreferenced(out.vertices, out.faces);

    std::vector<int> order(out.vertices.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return zyx_less(out.vertices[a], out.vertices[b]);
    });
    std::vector<int> rank(order.size());
    std::vector<GridPoint> sorted_vertices(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        rank[order[i]] = static_cast<int>(i);
        sorted_vertices[i] = out.vertices[order[i]];
    }
    out.vertices = std::move(sorted_vertices);

    for (auto& f : out.faces) {
        for (int& idx : f) idx = rank[idx];
        int lo = static_cast<int>(std::min_element(f.begin(), f.end()) - f.begin());
        std::rotate(f.begin(), f.begin() + lo, f.end());
    }
    std::sort(out.faces.begin(), out.faces.end());
    out.faces.erase(std::unique(out.faces.begin(), out.faces.end()), out.faces.end());
    return out;
}

// Eq-style flattening: 9 integers per face, (x,y,z) per vertex, face order.
inline FaceSequence to_sequence(const QuantizedMesh& mesh) {
    FaceSequence seq;
    seq.coords.reserve(mesh.faces.size() * 9);
    for (const auto& f : mesh.faces) {
        for (int idx : f) {
            const GridPoint& p = mesh.vertices[idx];
            seq.coords.push_back(p[0]);
            seq.coords.push_back(p[1]);
            seq.coords.push_back(p[2]);
        }
    }
    return seq;
}

struct FromSequenceResult {
    QuantizedMesh mesh;
    int dropped_faces = 0;  // faces whose vertex triples were not distinct
};

// Rebuilds a canonical mesh from a flat coordinate list. Vertices are deduced
// by deduplicating coordinate triples; the result is re-canonicalized so that
// from_sequence(to_sequence(m)) == m for canonical m.
inline FromSequenceResult from_sequence(const FaceSequence& seq) {
    if (seq.coords.size() % 9 != 0) throw Error("from_sequence: length not a multiple of 9");
    FromSequenceResult res;
    std::map<GridPoint, int> index;
    auto intern = [&](const GridPoint& p) {
        auto [it, inserted] = index.emplace(p, static_cast<int>(res.mesh.vertices.size()));
        if (inserted) res.mesh.vertices.push_back(p);
        return it->second;
    };
    for (std::size_t f = 0; f < seq.coords.size(); f += 9) {
        GridPoint a = {seq.coords[f + 0], seq.coords[f + 1], seq.coords[f + 2]};
        GridPoint b = {seq.coords[f + 3], seq.coords[f + 4], seq.coords[f + 5]};
        GridPoint c = {seq.coords[f + 6], seq.coords[f + 7], seq.coords[f + 8]};
        if (a == b || b == c || a == c) {
            ++res.dropped_faces;
            continue;
        }
        res.mesh.faces.push_back({intern(a), intern(b), intern(c)});
    }
    if (res.mesh.faces.empty()) throw Error("from_sequence: empty mesh");
    res.mesh = canonicalize(res.mesh);
    return res;
}

struct FaceNormal {
    Vec3 normal = {0.0, 0.0, 0.0};
    bool degenerate = false;
};

inline double face_area(const QuantizedMesh& mesh, int face_index) {
    const Triangle& f = mesh.faces[face_index];
    Vec3 v1 = dequantize_point(mesh.vertices[f[0]]);
    Vec3 v2 = dequantize_point(mesh.vertices[f[1]]);
    Vec3 v3 = dequantize_point(mesh.vertices[f[2]]);
    double e1[3] = {v2[0] - v1[0], v2[1] - v1[1], v2[2] - v1[2]};
    double e2[3] = {v3[0] - v1[0], v3[1] - v1[1], v3[2] - v1[2]};
    double cx = e1[1] * e2[2] - e1[2] * e2[1];
    double cy = e1[2] * e2[0] - e1[0] * e2[2];
    double cz = e1[0] * e2[1] - e1[1] * e2[0];
    return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
}

// Unit normal of the dequantized face; zero vector + flag when the vertices
// are collinear on the grid.
inline FaceNormal face_normal(const QuantizedMesh& mesh, int face_index) {
    const Triangle& f = mesh.faces[face_index];
    Vec3 v1 = dequantize_point(mesh.vertices[f[0]]);
    Vec3 v2 = dequantize_point(mesh.vertices[f[1]]);
    Vec3 v3 = dequantize_point(mesh.vertices[f[2]]);
    double e1[3] = {v2[0] - v1[0], v2[1] - v1[1], v2[2] - v1[2]};
    double e2[3] = {v3[0] - v1[0], v3[1] - v1[1], v3[2] - v1[2]};
    FaceNormal out;
    out.normal = {e1[1] * e2[2] - e1[2] * e2[1],
                  e1[2] * e2[0] - e1[0] * e2[2],
                  e1[0] * e2[1] - e1[1] * e2[0]};
    double len = std::sqrt(out.normal[0] * out.normal[0] + out.normal[1] * out.normal[1] +
                           out.normal[2] * out.normal[2]);
    if (len < 1e-12) {
        out.normal = {0.0, 0.0, 0.0};
        out.degenerate = true;
        return out;
    }
    for (int a = 0; a < 3; ++a) out.normal[a] /= len;
    return out;
}

// Faces are adjacent iff they share a full edge (an unordered vertex pair).
// Neighbor lists are sorted and deduplicated.
inline std::vector<std::vector<int>> face_adjacency(const QuantizedMesh& mesh) {
    std::map<std::pair<int, int>, std::vector<int>> edge_faces;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        for (int e = 0; e < 3; ++e) {
            int a = mesh.faces[f][e], b = mesh.faces[f][(e + 1) % 3];
            edge_faces[{std::min(a, b), std::max(a, b)}].push_back(static_cast<int>(f));
        }
    }
    std::vector<std::vector<int>> adj(mesh.faces.size());
    for (const auto& [edge, faces] : edge_faces) {
        for (std::size_t i = 0; i < faces.size(); ++i)
            for (std::size_t j = i + 1; j < faces.size(); ++j) {
                adj[faces[i]].push_back(faces[j]);
                adj[faces[j]].push_back(faces[i]);
            }
    }
    for (auto& ns : adj) {
        std::sort(ns.begin(), ns.end());
        ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    }
    return adj;
}

inline void validate(const QuantizedMesh& mesh) {
    if (mesh.faces.empty()) throw Error("mesh: face count must be >= 1");
    for (const auto& p : mesh.vertices)
        for (int c : p)
            if (c < 0 || c >= kGridSize) throw Error("mesh: coordinate outside 7-bit grid");
    int n = static_cast<int>(mesh.vertices.size());
    for (const auto& f : mesh.faces) {
        for (int idx : f)
            if (idx < 0 || idx >= n) throw Error("mesh: face index out of range");
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
            throw Error("mesh: face with repeated vertex");
    }
}

}  // namespace pivotgen
