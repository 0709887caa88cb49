#pragma once

#include <algorithm>
#include <set>
#include <utility>
#include <vector>

#include "pivotgen/common.hpp"
#include "pivotgen/mesh.hpp"
#include "pivotgen/rng.hpp"

namespace pivotgen {

// Ordered list of selected high-degree vertices, sorted ascending by (z,y,x).
struct PivotSet {
    std::vector<GridPoint> pivots;

    std::size_t size() const { return pivots.size(); }
};

// Degree of v = number of distinct vertices sharing an edge with v, on the
// undirected graph whose edges are the face sides.
inline std::vector<std::pair<int, int>> vertex_degrees(const QuantizedMesh& mesh) {
    std::vector<std::set<int>> adj(mesh.vertices.size());
    for (const auto& f : mesh.faces) {
        for (int e = 0; e < 3; ++e) {
            int a = f[e], b = f[(e + 1) % 3];
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    std::vector<std::pair<int, int>> out;
    out.reserve(adj.size());
    for (std::size_t i = 0; i < adj.size(); ++i)
        out.emplace_back(static_cast<int>(i), static_cast<int>(adj[i].size()));
    return out;
}

// Top-k by degree with k = max(1, round(eta_select * V)); ties broken by the
// canonical (z,y,x) key, lower key wins. Result sorted by (z,y,x).
inline PivotSet select_pivots(const QuantizedMesh& mesh, double eta_select) {
    if (mesh.vertices.empty()) throw Error("select_pivots: empty mesh");
    if (eta_select <= 0.0 || eta_select > 1.0) throw Error("select_pivots: eta out of (0,1]");
    auto degrees = vertex_degrees(mesh);
    int v = static_cast<int>(mesh.vertices.size());
    int k = std::max(1, round_half_up(eta_select * v));
    k = std::min(k, v);

    std::vector<int> order(v);
    for (int i = 0; i < v; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (degrees[a].second != degrees[b].second) return degrees[a].second > degrees[b].second;
        return zyx_less(mesh.vertices[a], mesh.vertices[b]);
    });

    PivotSet set;
    set.pivots.reserve(k);
    for (int i = 0; i < k; ++i) set.pivots.push_back(mesh.vertices[order[i]]);
    std::sort(set.pivots.begin(), set.pivots.end(), zyx_less);
    return set;
}

// Uniformly removes round(eta_drop * vertex_count) pivots, never emptying the
// set. Training-time only; inference uses the full selection.
inline PivotSet drop_pivots(const PivotSet& pivots, int vertex_count, double eta_drop, Rng& rng) {
    if (pivots.pivots.empty()) throw Error("drop_pivots: empty pivot set");
    int d = round_half_up(eta_drop * vertex_count);
    d = std::max(0, std::min<int>(d, static_cast<int>(pivots.size()) - 1));
    if (d == 0) return pivots;

    int p = static_cast<int>(pivots.size());
    std::vector<int> idx(p);
    for (int i = 0; i < p; ++i) idx[i] = i;
    // Partial Fisher-Yates: the first d entries are the dropped ones.
    for (int t = 0; t < d; ++t) {
        int j = t + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p - t)));
        std::swap(idx[t], idx[j]);
    }
    std::vector<bool> dropped(p, false);
    for (int t = 0; t < d; ++t) dropped[idx[t]] = true;

    PivotSet out;
    out.pivots.reserve(p - d);
    for (int i = 0; i < p; ++i)
        if (!dropped[i]) out.pivots.push_back(pivots.pivots[i]);
    // Input was (z,y,x)-sorted and we kept relative order, so output stays sorted.
    return out;
}

}  // namespace pivotgen
