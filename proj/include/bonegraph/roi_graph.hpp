#pragma once

// The 17-ROI hand schema with its four anatomy groups, the two graphs built
// on it (natural joint connections and within-group cliques), and the
// normalized propagation matrices used by the graph convolutions.

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bonegraph/rng.hpp"

namespace bonegraph {

enum class LaplacianMode { symmetric, literal };

inline std::string to_string(LaplacianMode m) {
    return m == LaplacianMode::symmetric ? "symmetric" : "literal";
}
inline LaplacianMode laplacian_mode_from_string(const std::string& s) {
    if (s == "symmetric") return LaplacianMode::symmetric;
    if (s == "literal") return LaplacianMode::literal;
    throw std::runtime_error("unknown laplacian mode '" + s + "' (expected symmetric|literal)");
}

struct RoiSchema {
    static constexpr int kRoiCount = 17;
    static constexpr int kGroupCount = 4;

    std::vector<std::string> names;        // schema order; defines node/pillar row order
    std::vector<std::string> group_names;  // distinct group labels, first-appearance order
    std::vector<int> group_of;             // roi index -> group index
    std::vector<std::pair<int, int>> g1_edges;  // u < v, no duplicates

    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        throw std::runtime_error("roi schema: unknown ROI '" + name + "'");
    }

    std::vector<int> group_members(int g) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < group_of.size(); ++i)
            if (group_of[i] == g) out.push_back(static_cast<int>(i));
        return out;
    }

    std::vector<int> g1_neighbors(int v) const {
        std::vector<int> out;
        for (auto [a, b] : g1_edges) {
            if (a == v) out.push_back(b);
            if (b == v) out.push_back(a);
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    std::vector<int> g2_neighbors(int v) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < group_of.size(); ++i)
            if (static_cast<int>(i) != v && group_of[i] == group_of[v]) out.push_back(static_cast<int>(i));
        return out;
    }

    // Per-finger chains A_i-B_i-C_i; the C row attaches to the carpal nodes
    // (thumb/index/middle to D1, ring/little to D2) and D1-D2 are connected.
    static RoiSchema default_schema() {
        nlohmann::json j;
        j["rois"] = nlohmann::json::array();
        const char* letters[] = {"A", "B", "C"};
        for (const char* L : letters)
            for (int i = 1; i <= 5; ++i)
                j["rois"].push_back({{"name", std::string(L) + std::to_string(i)}, {"group", std::string(L)}});
        j["rois"].push_back({{"name", "D1"}, {"group", "D"}});
        j["rois"].push_back({{"name", "D2"}, {"group", "D"}});
        j["g1_edges"] = nlohmann::json::array();
        for (int i = 1; i <= 5; ++i) {
            j["g1_edges"].push_back({"A" + std::to_string(i), "B" + std::to_string(i)});
            j["g1_edges"].push_back({"B" + std::to_string(i), "C" + std::to_string(i)});
        }
        j["g1_edges"].push_back({"C1", "D1"});
        j["g1_edges"].push_back({"C2", "D1"});
        j["g1_edges"].push_back({"C3", "D1"});
        j["g1_edges"].push_back({"C4", "D2"});
        j["g1_edges"].push_back({"C5", "D2"});
        j["g1_edges"].push_back({"D1", "D2"});
        return from_json(j);
    }

    static RoiSchema from_json(const nlohmann::json& j) {
        RoiSchema s;
        if (!j.contains("rois") || !j["rois"].is_array())
            throw std::runtime_error("roi schema: missing 'rois' array");
        for (const auto& r : j["rois"]) {
            if (!r.contains("name") || !r.contains("group"))
                throw std::runtime_error("roi schema: each roi needs 'name' and 'group'");
            const std::string name = r["name"].get<std::string>();
            const std::string group = r["group"].get<std::string>();
            if (std::find(s.names.begin(), s.names.end(), name) != s.names.end())
                throw std::runtime_error("roi schema: duplicate ROI '" + name + "'");
            int gidx = -1;
            for (std::size_t g = 0; g < s.group_names.size(); ++g)
                if (s.group_names[g] == group) gidx = static_cast<int>(g);
            if (gidx < 0) {
                gidx = static_cast<int>(s.group_names.size());
                s.group_names.push_back(group);
            }
            s.names.push_back(name);
            s.group_of.push_back(gidx);
        }
        if (static_cast<int>(s.names.size()) != kRoiCount)
            throw std::runtime_error("roi schema: expected " + std::to_string(kRoiCount) + " ROIs, got " +
                                     std::to_string(s.names.size()));
        if (static_cast<int>(s.group_names.size()) != kGroupCount)
            throw std::runtime_error("roi schema: expected " + std::to_string(kGroupCount) + " anatomy groups, got " +
                                     std::to_string(s.group_names.size()));
        if (!j.contains("g1_edges") || !j["g1_edges"].is_array())
            throw std::runtime_error("roi schema: missing 'g1_edges' array");
        std::set<std::pair<int, int>> seen;
        for (const auto& e : j["g1_edges"]) {
            if (!e.is_array() || e.size() != 2)
                throw std::runtime_error("roi schema: each g1 edge must be a pair of ROI names");
            int u = s.index_of(e[0].get<std::string>());
            int v = s.index_of(e[1].get<std::string>());
            if (u == v) throw std::runtime_error("roi schema: self edge on '" + s.names[u] + "'");
            if (u > v) std::swap(u, v);
            if (!seen.insert({u, v}).second)
                throw std::runtime_error("roi schema: duplicate edge " + s.names[u] + "-" + s.names[v]);
            s.g1_edges.emplace_back(u, v);
        }
        return s;
    }

    static RoiSchema load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("roi schema: cannot open '" + path + "'");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw std::runtime_error("roi schema: failed to parse '" + path + "': " + e.what());
        }
        return from_json(j);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["rois"] = nlohmann::json::array();
        for (std::size_t i = 0; i < names.size(); ++i)
            j["rois"].push_back({{"name", names[i]}, {"group", group_names[group_of[i]]}});
        j["g1_edges"] = nlohmann::json::array();
        for (auto [u, v] : g1_edges) j["g1_edges"].push_back({names[u], names[v]});
        return j;
    }

    // Canonical form for hashing: ordered rois, edges sorted pairwise.
    std::string canonical_string() const {
        auto j = to_json();
        std::vector<std::pair<std::string, std::string>> edges;
        for (auto [u, v] : g1_edges) {
            std::string a = names[u], b = names[v];
            if (b < a) std::swap(a, b);
            edges.emplace_back(a, b);
        }
        std::sort(edges.begin(), edges.end());
        j["g1_edges"] = nlohmann::json::array();
        for (auto& [a, b] : edges) j["g1_edges"].push_back({a, b});
        return j.dump();
    }

    std::uint64_t hash() const { return fnv1a64(canonical_string()); }
};

// ---------------------------------------------------------------------------
// Propagation matrices.
//
// Degree is taken as rowsum(A + I), i.e. the self-loop counts toward the
// degree. The default mode uses the symmetric normalization
//   L = D^{-1/2} (A + I) D^{-1/2}
// whose spectrum lies in [-1, 1] with top eigenvalue exactly 1. The literal
// mode computes D^{-1/2} (A + I) D^{+1/2} instead, which is similar to A + I
// and generally asymmetric; it is kept selectable for comparison.

inline std::vector<double> normalized_propagation(const std::vector<double>& a, int n, LaplacianMode mode) {
    if (static_cast<int>(a.size()) != n * n) throw std::invalid_argument("normalized_propagation: bad matrix size");
    for (int i = 0; i < n; ++i) {
        if (a[i * n + i] != 0.0)
            throw std::invalid_argument("normalized_propagation: adjacency must have zero diagonal");
        for (int j = 0; j < n; ++j) {
            if (a[i * n + j] != a[j * n + i])
                throw std::invalid_argument("normalized_propagation: adjacency must be symmetric");
            if (a[i * n + j] != 0.0 && a[i * n + j] != 1.0)
                throw std::invalid_argument("normalized_propagation: adjacency entries must be 0 or 1");
        }
    }
    std::vector<double> deg(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double d = 1.0;  // self loop
        for (int j = 0; j < n; ++j) d += a[i * n + j];
        deg[i] = d;
    }
    std::vector<double> l(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double atilde = a[i * n + j] + (i == j ? 1.0 : 0.0);
            if (atilde == 0.0) continue;
            const double scale = mode == LaplacianMode::symmetric
                                     ? 1.0 / std::sqrt(deg[i] * deg[j])
                                     : std::sqrt(deg[j] / deg[i]);
            l[i * n + j] = atilde * scale;
        }
    return l;
}

struct DualGraph {
    int n = 0;
    LaplacianMode mode = LaplacianMode::symmetric;
    std::vector<double> a1, a2;  // 0/1 adjacency, zero diagonal
    std::vector<double> l1, l2;  // propagation matrices
};

inline DualGraph build_graphs(const RoiSchema& schema, LaplacianMode mode = LaplacianMode::symmetric) {
    DualGraph g;
    g.n = static_cast<int>(schema.names.size());
    g.mode = mode;
    g.a1.assign(static_cast<std::size_t>(g.n) * g.n, 0.0);
    g.a2.assign(static_cast<std::size_t>(g.n) * g.n, 0.0);
    for (auto [u, v] : schema.g1_edges) {
        g.a1[u * g.n + v] = 1.0;
        g.a1[v * g.n + u] = 1.0;
    }
    for (int u = 0; u < g.n; ++u)
        for (int v = 0; v < g.n; ++v)
            if (u != v && schema.group_of[u] == schema.group_of[v]) g.a2[u * g.n + v] = 1.0;
    g.l1 = normalized_propagation(g.a1, g.n, mode);
    g.l2 = normalized_propagation(g.a2, g.n, mode);
    return g;
}

}  // namespace bonegraph
