#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <queue>
#include <set>
#include <sstream>
#include <vector>

#include "atd/graphworld.hpp"
#include "atd/serialize.hpp"

using namespace atd;
using namespace atd::world;

namespace {

// Exhaustive simple-path enumeration: the independent route for shortest-path
// lengths on small graphs.
void enumerate_paths(const NavGraph& g, NodeId cur, NodeId goal, std::vector<bool>& used,
                     double len, double& best) {
    if (cur == goal) {
        best = std::min(best, len);
        return;
    }
    if (len >= best) return;  // prune: all edges positive
    for (const auto& [v, w] : g.neighbors(cur)) {
        if (used[v]) continue;
        used[v] = true;
        enumerate_paths(g, v, goal, used, len + w, best);
        used[v] = false;
    }
}

double brute_force_shortest(const NavGraph& g, NodeId a, NodeId b) {
    std::vector<bool> used(g.node_count(), false);
    used[a] = true;
    double best = std::numeric_limits<double>::infinity();
    enumerate_paths(g, a, b, used, 0.0, best);
    return best;
}

double path_length(const NavGraph& g, const std::vector<NodeId>& path) {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) s += g.edge_length(path[i], path[i + 1]);
    return s;
}

NavGraph small_world(std::uint64_t seed, int nodes = 9) {
    WorldConfig cfg;
    cfg.node_count = nodes;
    cfg.max_degree = 4;
    cfg.landmark_vocab = 6;
    cfg.view_dim = 8;
    return generate_world(cfg, seed);
}

}  // namespace

TEST_CASE("world generation is deterministic in (config, seed)") {
    NavGraph a = small_world(42), b = small_world(42), c = small_world(43);
    REQUIRE(a.node_count() == b.node_count());
    CHECK(a.landmarks == b.landmarks);
    CHECK(a.adj == b.adj);
    for (int v = 0; v < a.node_count(); ++v) {
        CHECK(a.positions[v].x == b.positions[v].x);
        CHECK(a.positions[v].y == b.positions[v].y);
        CHECK(a.view_features[v] == b.view_features[v]);
    }
    // a different seed actually moves things
    bool same = a.adj == c.adj;
    for (int v = 0; same && v < a.node_count(); ++v)
        same = a.positions[v].x == c.positions[v].x && a.positions[v].y == c.positions[v].y;
    CHECK_FALSE(same);
}

TEST_CASE("generated worlds satisfy their structural invariants") {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        NavGraph g = small_world(seed, 6 + static_cast<int>(seed % 7));
        const WorldConfig& cfg = g.config;

        // pairwise separation
        for (int u = 0; u < g.node_count(); ++u)
            for (int v = u + 1; v < g.node_count(); ++v)
                REQUIRE(dist2d(g.positions[u], g.positions[v]) >= cfg.min_separation);

        // independent connectivity check (BFS here, generation uses its own)
        std::vector<bool> seen(g.node_count(), false);
        std::queue<NodeId> q;
        q.push(0);
        seen[0] = true;
        int count = 1;
        while (!q.empty()) {
            NodeId u = q.front();
            q.pop();
            for (const auto& [v, w] : g.neighbors(u))
                if (!seen[v]) {
                    seen[v] = true;
                    ++count;
                    q.push(v);
                }
        }
        REQUIRE(count == g.node_count());

        for (int v = 0; v < g.node_count(); ++v) {
            const auto& nb = g.neighbors(v);
            REQUIRE(static_cast<int>(nb.size()) <= cfg.max_degree);
            REQUIRE(!nb.empty());
            // edge lengths are the Euclidean distances
            for (const auto& [u, w] : nb)
                REQUIRE(w == Catch::Approx(dist2d(g.positions[v], g.positions[u])));
            // landmark labels of any node's neighbours are pairwise distinct
            std::set<int> lm;
            for (const auto& [u, w] : nb) {
                REQUIRE(g.landmarks[u] >= 0);
                REQUIRE(g.landmarks[u] < cfg.landmark_vocab);
                REQUIRE(lm.insert(g.landmarks[u]).second);
            }
            // view features carry the landmark one-hot up front
            for (int j = 0; j < cfg.landmark_vocab; ++j)
                REQUIRE(g.view_features[v][j] == (j == g.landmarks[v] ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("world config validation rejects bad inputs") {
    WorldConfig cfg;
    cfg.node_count = 5;
    CHECK_THROWS_AS(generate_world(cfg, 1), ConfigError);
    cfg = WorldConfig{};
    cfg.max_degree = 1;
    CHECK_THROWS_AS(generate_world(cfg, 1), ConfigError);
    cfg = WorldConfig{};
    cfg.landmark_vocab = 3;
    CHECK_THROWS_AS(generate_world(cfg, 1), ConfigError);
    cfg = WorldConfig{};
    cfg.view_dim = cfg.landmark_vocab - 1;
    CHECK_THROWS_AS(generate_world(cfg, 1), ConfigError);
}

TEST_CASE("dijkstra agrees with exhaustive path enumeration") {
    int pairs_checked = 0;
    for (std::uint64_t seed = 100; seed < 112; ++seed) {
        NavGraph g = small_world(seed, 8);
        for (NodeId a = 0; a < g.node_count(); ++a) {
            for (NodeId b = 0; b < g.node_count(); ++b) {
                auto [path, len] = shortest_path(g, a, b);
                const double oracle = brute_force_shortest(g, a, b);
                REQUIRE(len == Catch::Approx(oracle).epsilon(1e-12));
                // returned path is walkable and has the claimed length
                REQUIRE(path.front() == a);
                REQUIRE(path.back() == b);
                REQUIRE(path_length(g, path) == Catch::Approx(len).epsilon(1e-12));
                ++pairs_checked;
            }
        }
    }
    CHECK(pairs_checked == 12 * 8 * 8);
}

TEST_CASE("shortest distances satisfy the triangle inequality") {
    NavGraph g = small_world(7, 10);
    for (NodeId a = 0; a < g.node_count(); ++a)
        for (NodeId b = 0; b < g.node_count(); ++b)
            for (NodeId c = 0; c < g.node_count(); ++c)
                REQUIRE(shortest_distance(g, a, c) <=
                        shortest_distance(g, a, b) + shortest_distance(g, b, c) + 1e-9);
}

TEST_CASE("shortest_path rejects unknown nodes") {
    NavGraph g = small_world(3);
    CHECK_THROWS_AS(shortest_path(g, -1, 0), std::runtime_error);
    CHECK_THROWS_AS(shortest_path(g, 0, g.node_count()), std::runtime_error);
}

TEST_CASE("observations are sorted and geometrically consistent") {
    NavGraph g = small_world(5);
    for (NodeId v = 0; v < g.node_count(); ++v) {
        const double heading = 0.7;
        auto obs = observations(g, v, heading);
        REQUIRE(obs.size() == g.neighbors(v).size());
        for (std::size_t i = 0; i + 1 < obs.size(); ++i)
            REQUIRE(obs[i].direction <= obs[i + 1].direction);
        for (const Observation& o : obs) {
            REQUIRE(o.direction >= -kPi);
            REQUIRE(o.direction < kPi);
            REQUIRE(o.distance == Catch::Approx(g.edge_length(v, o.candidate_id)));
            REQUIRE(o.view == g.view_features[o.candidate_id]);
            const double abs_dir = edge_bearing(g, v, o.candidate_id);
            REQUIRE(o.direction == Catch::Approx(wrap_angle(abs_dir - heading)));
        }
    }
}

TEST_CASE("instructions replay to the goal by greedy token following") {
    // independent replay: walk the graph using only the tokens
    for (std::uint64_t seed = 200; seed < 220; ++seed) {
        NavGraph g = small_world(seed);
        EpisodeConfig ec;
        ec.min_hops = 2;
        ec.max_hops = 6;
        Episode ep = sample_episode(g, ec, seed * 31 + 1);
        const TokenSet toks{g.config.landmark_vocab};

        REQUIRE(ep.instruction.size() == 2 * (ep.gt_path.size() - 1) + 1);
        REQUIRE(ep.instruction.back() == toks.stop());

        NodeId cur = ep.start;
        double heading = 0.0;
        for (std::size_t i = 0; i + 1 < ep.instruction.size(); i += 2) {
            const int dir_tok = ep.instruction[i];
            const int lm_tok = ep.instruction[i + 1];
            REQUIRE(toks.is_landmark(lm_tok));
            // the landmark uniquely selects a neighbour (sibling distinctness)
            NodeId next = -1;
            for (const auto& [v, w] : g.neighbors(cur)) {
                if (g.landmarks[v] == lm_tok) {
                    REQUIRE(next == -1);
                    next = v;
                }
            }
            REQUIRE(next != -1);
            // and the direction token matches the actual turn
            const double rel = wrap_angle(edge_bearing(g, cur, next) - heading);
            REQUIRE(direction_token(toks, rel) == dir_tok);
            heading = edge_bearing(g, cur, next);
            cur = next;
        }
        REQUIRE(cur == ep.goal);
    }
}

TEST_CASE("speaker handles the trivial path and rejects invalid ones") {
    NavGraph g = small_world(9);
    const TokenSet toks{g.config.landmark_vocab};
    auto only_stop = instruction_for_path(g, {0});
    REQUIRE(only_stop == std::vector<int>{toks.stop()});
    CHECK_THROWS_AS(instruction_for_path(g, {}), std::runtime_error);
    // find a non-adjacent pair
    for (NodeId a = 0; a < g.node_count(); ++a)
        for (NodeId b = 0; b < g.node_count(); ++b)
            if (a != b && !g.has_edge(a, b)) {
                CHECK_THROWS_AS(instruction_for_path(g, {a, b}), std::runtime_error);
                goto done;
            }
done:;
}

TEST_CASE("episode sampling respects hop bounds and is deterministic") {
    NavGraph g = small_world(77, 12);
    EpisodeConfig ec;
    ec.min_hops = 3;
    ec.max_hops = 5;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Episode e1 = sample_episode(g, ec, s);
        Episode e2 = sample_episode(g, ec, s);
        REQUIRE(e1.gt_path == e2.gt_path);
        REQUIRE(e1.instruction == e2.instruction);
        const int hops = static_cast<int>(e1.gt_path.size()) - 1;
        REQUIRE(hops >= ec.min_hops);
        REQUIRE(hops <= ec.max_hops);
        // gt path is the shortest path
        auto [sp, len] = shortest_path(g, e1.start, e1.goal);
        REQUIRE(path_length(g, e1.gt_path) == Catch::Approx(len));
        REQUIRE(e1.instruction == instruction_for_path(g, e1.gt_path));
    }
    EpisodeConfig impossible;
    impossible.min_hops = 50;
    impossible.max_hops = 60;
    CHECK_THROWS_AS(sample_episode(g, impossible, 0), ConfigError);
}

TEST_CASE("world serialization round-trips bit-exactly") {
    std::vector<NavGraph> worlds;
    for (std::uint64_t s = 300; s < 303; ++s) worlds.push_back(small_world(s, 7 + (int)(s % 3)));
    std::stringstream ss;
    io::write_worlds(ss, worlds);
    auto back = io::read_worlds(ss);
    REQUIRE(back.size() == worlds.size());
    for (std::size_t k = 0; k < worlds.size(); ++k) {
        const NavGraph& a = worlds[k];
        const NavGraph& b = back[k];
        REQUIRE(a.world_id == b.world_id);
        REQUIRE(a.node_count() == b.node_count());
        REQUIRE(a.landmarks == b.landmarks);
        REQUIRE(a.adj == b.adj);  // exact doubles
        REQUIRE(a.config.node_count == b.config.node_count);
        REQUIRE(a.config.min_separation == b.config.min_separation);
        for (int v = 0; v < a.node_count(); ++v) {
            REQUIRE(a.positions[v].x == b.positions[v].x);
            REQUIRE(a.positions[v].y == b.positions[v].y);
            REQUIRE(a.view_features[v] == b.view_features[v]);
        }
    }
}

TEST_CASE("episode serialization round-trips") {
    NavGraph g = small_world(55);
    EpisodeConfig ec;
    std::vector<Episode> eps;
    for (std::uint64_t s = 0; s < 5; ++s) eps.push_back(sample_episode(g, ec, s));
    std::stringstream ss;
    io::write_episodes(ss, eps);
    auto back = io::read_episodes(ss);
    REQUIRE(back.size() == eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        REQUIRE(back[i].world_id == eps[i].world_id);
        REQUIRE(back[i].episode_id == eps[i].episode_id);
        REQUIRE(back[i].start == eps[i].start);
        REQUIRE(back[i].goal == eps[i].goal);
        REQUIRE(back[i].gt_path == eps[i].gt_path);
        REQUIRE(back[i].instruction == eps[i].instruction);
        REQUIRE(back[i].success_radius == eps[i].success_radius);
    }
}

TEST_CASE("malformed world files are rejected with line context") {
    {
        std::stringstream ss("{\"id\":0,\"pos\":[0,0],\"landmark\":0,\"feature\":[1]}\n");
        CHECK_THROWS_AS(io::read_worlds(ss), IoError);  // node before header
    }
    {
        std::stringstream ss("not json\n");
        CHECK_THROWS_AS(io::read_worlds(ss), IoError);
    }
    {
        NavGraph g = small_world(1);
        std::stringstream full;
        io::write_worlds(full, {g});
        // drop the last line: edge count no longer matches the header
        std::string text = full.str();
        text.erase(text.find_last_of('\n', text.size() - 2) + 1);
        std::stringstream truncated(text);
        CHECK_THROWS_AS(io::read_worlds(truncated), IoError);
    }
    {
        std::stringstream ss(R"({"version":99,"world_id":0,"node_count":0,"edge_count":0,"config":{}})");
        CHECK_THROWS_AS(io::read_worlds(ss), IoError);
    }
}
