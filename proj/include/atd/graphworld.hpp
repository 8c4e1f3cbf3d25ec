#pragma once

// Procedurally generated navigation worlds: planar node layouts, Euclidean
// weighted edges, per-node landmark labels and view features, a rule-based
// instruction speaker, and the exact shortest-path oracle that supervision
// and metrics are built on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "atd/common.hpp"

namespace atd::world {

struct WorldConfig {
    int node_count = 10;
    int max_degree = 4;
    int landmark_vocab = 6;
    int view_dim = 16;            // d_v, >= landmark_vocab
    double min_separation = 3.5;  // meters between any two nodes
    double extra_edge_prob = 0.35;
    double extra_edge_radius_factor = 2.2;  // x min_separation
    double view_noise_std = 1.0;

    void validate() const {
        if (node_count < 6)
            throw ConfigError("node_count must be >= 6 (too small to pose a navigation problem)");
        if (node_count > 200) throw ConfigError("node_count must be <= 200");
        if (max_degree < 2) throw ConfigError("infeasible config: max_degree must be >= 2");
        if (landmark_vocab < 4) throw ConfigError("landmark_vocab must be >= 4");
        if (view_dim < landmark_vocab) throw ConfigError("view_dim must be >= landmark_vocab");
        if (min_separation <= 0.0) throw ConfigError("min_separation must be > 0");
    }
};

struct Vec2 {
    double x = 0.0, y = 0.0;
};

inline double dist2d(const Vec2& a, const Vec2& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

struct NavGraph {
    std::uint64_t world_id = 0;
    WorldConfig config;
    std::vector<NodeId> nodes;                      // 0..n-1
    std::vector<Vec2> positions;                    // by node id
    std::vector<int> landmarks;                     // by node id
    std::vector<std::vector<double>> view_features; // by node id, length view_dim
    std::map<NodeId, std::map<NodeId, double>> adj; // symmetric, length in meters

    int node_count() const { return static_cast<int>(nodes.size()); }

    bool has_node(NodeId v) const { return v >= 0 && v < node_count(); }

    void check_node(NodeId v) const {
        require(has_node(v), "unknown node id ", v, " (world ", world_id, ")");
    }

    bool has_edge(NodeId a, NodeId b) const {
        auto it = adj.find(a);
        return it != adj.end() && it->second.count(b) != 0;
    }

    double edge_length(NodeId a, NodeId b) const {
        check_node(a);
        check_node(b);
        auto it = adj.find(a);
        require(it != adj.end() && it->second.count(b), "no edge ", a, "-", b);
        return it->second.at(b);
    }

    const std::map<NodeId, double>& neighbors(NodeId v) const {
        check_node(v);
        static const std::map<NodeId, double> empty;
        auto it = adj.find(v);
        return it == adj.end() ? empty : it->second;
    }

    std::size_t edge_count() const {
        std::size_t c = 0;
        for (const auto& [u, nb] : adj) c += nb.size();
        return c / 2;
    }
};

/// One navigable candidate as seen from the current node.
struct Observation {
    NodeId candidate_id = 0;
    std::vector<double> view;  // the candidate's view_feature
    double direction = 0.0;    // radians relative to current heading, [-pi, pi)
    double distance = 0.0;     // meters (edge length)
};

// ---------------------------------------------------------------------------
// instruction tokens

// Token layout: landmark ids occupy [0, vocab); then LEFT, RIGHT, FORWARD, STOP.
struct TokenSet {
    int vocab;
    int left() const { return vocab; }
    int right() const { return vocab + 1; }
    int forward() const { return vocab + 2; }
    int stop() const { return vocab + 3; }
    int total() const { return vocab + 4; }
    bool is_landmark(int t) const { return t >= 0 && t < vocab; }
};

struct EpisodeConfig {
    int min_hops = 3;
    int max_hops = 7;
    double success_radius = 3.0;  // meters; evaluation default

    void validate() const {
        if (min_hops < 1 || max_hops < min_hops) throw ConfigError("bad hop bounds");
        if (success_radius <= 0.0) throw ConfigError("success_radius must be > 0");
    }
};

struct Episode {
    std::uint64_t world_id = 0;
    std::uint64_t episode_id = 0;
    NodeId start = 0;
    NodeId goal = 0;
    std::vector<NodeId> gt_path;       // start .. goal, consecutive pairs are edges
    std::vector<int> instruction;      // token ids, ends with STOP
    double success_radius = 3.0;
};

// ---------------------------------------------------------------------------
// shortest-path oracle

/// Dijkstra with deterministic (distance, node-id) tie-breaking.
/// Returns the minimum-length path a..b and its length in meters.
inline std::pair<std::vector<NodeId>, double> shortest_path(const NavGraph& g, NodeId a, NodeId b) {
    g.check_node(a);
    g.check_node(b);
    if (a == b) return {{a}, 0.0};

    const int n = g.node_count();
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::vector<NodeId> parent(n, -1);
    using Entry = std::pair<double, NodeId>;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> pq;
    dist[a] = 0.0;
    pq.push({0.0, a});
    while (!pq.empty()) {
        auto [d, u] = pq.top();
        pq.pop();
        if (d > dist[u]) continue;
        for (const auto& [v, w] : g.neighbors(u)) {
            const double nd = d + w;
            // strictly-better or equal-but-smaller-parent keeps paths deterministic
            if (nd < dist[v] - 1e-15 || (std::abs(nd - dist[v]) <= 1e-15 && u < parent[v])) {
                dist[v] = nd;
                parent[v] = u;
                pq.push({nd, v});
            }
        }
    }
    require(std::isfinite(dist[b]), "nodes ", a, " and ", b, " are not connected");
    std::vector<NodeId> path;
    for (NodeId v = b; v != -1; v = parent[v]) path.push_back(v);
    std::reverse(path.begin(), path.end());
    require(path.front() == a, "path reconstruction failed");
    return {path, dist[b]};
}

inline double shortest_distance(const NavGraph& g, NodeId a, NodeId b) {
    return shortest_path(g, a, b).second;
}

// ---------------------------------------------------------------------------
// observations

/// One Observation per neighbor of `current`, sorted by (direction, node id).
inline std::vector<Observation> observations(const NavGraph& g, NodeId current, double heading) {
    g.check_node(current);
    std::vector<Observation> out;
    for (const auto& [v, w] : g.neighbors(current)) {
        Observation o;
        o.candidate_id = v;
        o.view = g.view_features[v];
        const double abs_dir = std::atan2(g.positions[v].y - g.positions[current].y,
                                          g.positions[v].x - g.positions[current].x);
        o.direction = wrap_angle(abs_dir - heading);
        o.distance = w;
        out.push_back(std::move(o));
    }
    std::sort(out.begin(), out.end(), [](const Observation& a, const Observation& b) {
        if (a.direction != b.direction) return a.direction < b.direction;
        return a.candidate_id < b.candidate_id;
    });
    return out;
}

/// Absolute bearing of the edge u -> v.
inline double edge_bearing(const NavGraph& g, NodeId u, NodeId v) {
    return std::atan2(g.positions[v].y - g.positions[u].y, g.positions[v].x - g.positions[u].x);
}

// ---------------------------------------------------------------------------
// rule-based speaker

/// Buckets a relative turn angle into thirds of the circle.
inline int direction_token(const TokenSet& toks, double rel_angle) {
    if (rel_angle > kPi / 3.0) return toks.left();
    if (rel_angle < -kPi / 3.0) return toks.right();
    return toks.forward();
}

/// Emits per hop a direction token followed by the destination's landmark
/// token, terminated by STOP. Heading starts at 0 (+x axis) and follows the
/// walked edges. Deterministic in (graph, path).
inline std::vector<int> instruction_for_path(const NavGraph& g, const std::vector<NodeId>& path) {
    require(!path.empty(), "invalid path: empty");
    for (NodeId v : path) g.check_node(v);
    for (std::size_t i = 0; i + 1 < path.size(); ++i)
        require(g.has_edge(path[i], path[i + 1]), "invalid path: ", path[i], "-", path[i + 1],
                " is not an edge");
    const TokenSet toks{g.config.landmark_vocab};
    std::vector<int> out;
    double heading = 0.0;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        const double bearing = edge_bearing(g, path[i], path[i + 1]);
        out.push_back(direction_token(toks, wrap_angle(bearing - heading)));
        out.push_back(g.landmarks[path[i + 1]]);
        heading = bearing;
    }
    out.push_back(toks.stop());
    return out;
}

// ---------------------------------------------------------------------------
// world generation

namespace detail {

inline std::vector<Vec2> place_nodes(const WorldConfig& cfg, Rng& rng) {
    // square sized for comfortable packing at min_separation, grown on failure
    double side = std::ceil(std::sqrt(static_cast<double>(cfg.node_count))) *
                  cfg.min_separation * 1.7;
    for (int round = 0; round < 6; ++round, side *= 1.4) {
        std::vector<Vec2> pos;
        pos.reserve(cfg.node_count);
        bool ok = true;
        for (int i = 0; i < cfg.node_count && ok; ++i) {
            bool placed = false;
            for (int attempt = 0; attempt < 400; ++attempt) {
                Vec2 p{rng.uniform(0.0, side), rng.uniform(0.0, side)};
                bool clear = true;
                for (const Vec2& q : pos)
                    if (dist2d(p, q) < cfg.min_separation) {
                        clear = false;
                        break;
                    }
                if (clear) {
                    pos.push_back(p);
                    placed = true;
                    break;
                }
            }
            ok = placed;
        }
        if (ok) return pos;
    }
    throw ConfigError("infeasible config: could not place nodes at min_separation");
}

inline void add_edge(NavGraph& g, NodeId u, NodeId v) {
    const double len = dist2d(g.positions[u], g.positions[v]);
    g.adj[u][v] = len;
    g.adj[v][u] = len;
}

inline int degree(const NavGraph& g, NodeId v) {
    auto it = g.adj.find(v);
    return it == g.adj.end() ? 0 : static_cast<int>(it->second.size());
}

/// Landmark assignment under the sibling constraint: two neighbours of the
/// same node never share a landmark (keeps greedy instruction replay unique).
inline bool assign_landmarks(NavGraph& g, Rng& rng) {
    const int n = g.node_count();
    const int vocab = g.config.landmark_vocab;
    for (int attempt = 0; attempt < 20; ++attempt) {
        std::vector<int> lm(n, -1);
        std::vector<NodeId> order(g.nodes);
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_int(0, i)]);
        bool ok = true;
        for (NodeId v : order) {
            std::set<int> forbidden;
            for (const auto& [u, w1] : g.neighbors(v)) {
                for (const auto& [sib, w2] : g.neighbors(u)) {
                    if (sib != v && lm[sib] >= 0) forbidden.insert(lm[sib]);
                }
            }
            std::vector<int> allowed;
            for (int t = 0; t < vocab; ++t)
                if (!forbidden.count(t)) allowed.push_back(t);
            if (allowed.empty()) {
                ok = false;
                break;
            }
            lm[v] = allowed[rng.uniform_int(0, static_cast<std::int64_t>(allowed.size()) - 1)];
        }
        if (ok) {
            g.landmarks = std::move(lm);
            return true;
        }
    }
    return false;
}

}  // namespace detail

/// Generates a connected NavGraph. Identical (config, seed) gives a
/// bit-identical graph. Throws ConfigError for infeasible configurations.
inline NavGraph generate_world(const WorldConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "world"));

    NavGraph g;
    g.world_id = seed;
    g.config = cfg;
    g.nodes.resize(cfg.node_count);
    for (int i = 0; i < cfg.node_count; ++i) g.nodes[i] = i;
    g.positions = detail::place_nodes(cfg, rng);

    // spanning tree: each node links to its nearest predecessor with spare degree
    for (NodeId v = 1; v < cfg.node_count; ++v) {
        NodeId best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (NodeId u = 0; u < v; ++u) {
            if (detail::degree(g, u) >= cfg.max_degree) continue;
            const double d = dist2d(g.positions[u], g.positions[v]);
            if (d < best_d) {
                best_d = d;
                best = u;
            }
        }
        require(best >= 0, "infeasible config: spanning tree blocked by max_degree");
        detail::add_edge(g, v, best);
    }

    // extra edges between near pairs, degree permitting
    const double radius = cfg.extra_edge_radius_factor * cfg.min_separation;
    for (NodeId u = 0; u < cfg.node_count; ++u) {
        for (NodeId v = u + 1; v < cfg.node_count; ++v) {
            if (g.has_edge(u, v)) continue;
            if (dist2d(g.positions[u], g.positions[v]) > radius) continue;
            if (detail::degree(g, u) >= cfg.max_degree || detail::degree(g, v) >= cfg.max_degree)
                continue;
            if (rng.uniform() < cfg.extra_edge_prob) detail::add_edge(g, u, v);
        }
    }

    if (!detail::assign_landmarks(g, rng))
        throw ConfigError("infeasible config: landmark assignment failed (vocab too small for degree)");

    // view features: landmark one-hot followed by seeded gaussian noise
    g.view_features.assign(cfg.node_count, std::vector<double>(cfg.view_dim, 0.0));
    for (NodeId v = 0; v < cfg.node_count; ++v) {
        g.view_features[v][g.landmarks[v]] = 1.0;
        for (int j = cfg.landmark_vocab; j < cfg.view_dim; ++j)
            g.view_features[v][j] = cfg.view_noise_std * rng.gaussian();
    }

    // invariant sweep: connectivity, positive symmetric edges, degree bounds
    {
        std::vector<bool> seen(cfg.node_count, false);
        std::queue<NodeId> q;
        q.push(0);
        seen[0] = true;
        int reached = 1;
        while (!q.empty()) {
            NodeId u = q.front();
            q.pop();
            for (const auto& [v, w] : g.neighbors(u)) {
                require(w > 0.0, "edge length must be positive");
                require(g.edge_length(v, u) == w, "edge set must be symmetric");
                if (!seen[v]) {
                    seen[v] = true;
                    ++reached;
                    q.push(v);
                }
            }
        }
        require(reached == cfg.node_count, "generated graph not connected");
        for (NodeId v = 0; v < cfg.node_count; ++v) {
            const int d = detail::degree(g, v);
            require(d >= 1 && d <= cfg.max_degree, "degree bound violated at node ", v);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// episode sampling

/// Samples start/goal whose shortest path has a hop count inside the config
/// bounds; gt_path is that shortest path and the instruction is generated by
/// the speaker. Bounded rejection sampling; infeasible bounds throw.
inline Episode sample_episode(const NavGraph& g, const EpisodeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "episode"));
    const int n = g.node_count();
    const int max_tries = 400;
    for (int attempt = 0; attempt < max_tries; ++attempt) {
        const NodeId start = static_cast<NodeId>(rng.uniform_int(0, n - 1));
        const NodeId goal = static_cast<NodeId>(rng.uniform_int(0, n - 1));
        if (start == goal) continue;
        auto [path, len] = shortest_path(g, start, goal);
        const int hops = static_cast<int>(path.size()) - 1;
        if (hops < cfg.min_hops || hops > cfg.max_hops) continue;
        Episode ep;
        ep.world_id = g.world_id;
        ep.episode_id = seed;
        ep.start = start;
        ep.goal = goal;
        ep.gt_path = std::move(path);
        ep.instruction = instruction_for_path(g, ep.gt_path);
        ep.success_radius = cfg.success_radius;
        return ep;
    }
    throw ConfigError("episode sampling failed: hop bounds [" + std::to_string(cfg.min_hops) +
                      "," + std::to_string(cfg.max_hops) + "] infeasible for this world");
}

}  // namespace atd::world
