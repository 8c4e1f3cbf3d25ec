#pragma once

// JSONL persistence for worlds and episodes. A world file holds one header
// line per world followed by its node and edge lines; record kinds are told
// apart by key presence. Episode files are one JSON object per line.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atd/common.hpp"
#include "atd/graphworld.hpp"

namespace atd::io {

using json = nlohmann::json;
inline constexpr int kFormatVersion = 1;

inline json world_config_to_json(const world::WorldConfig& c) {
    return json{{"node_count", c.node_count},
                {"max_degree", c.max_degree},
                {"landmark_vocab", c.landmark_vocab},
                {"view_dim", c.view_dim},
                {"min_separation", c.min_separation},
                {"extra_edge_prob", c.extra_edge_prob},
                {"extra_edge_radius_factor", c.extra_edge_radius_factor},
                {"view_noise_std", c.view_noise_std}};
}

inline world::WorldConfig world_config_from_json(const json& j) {
    world::WorldConfig c;
    c.node_count = j.at("node_count").get<int>();
    c.max_degree = j.at("max_degree").get<int>();
    c.landmark_vocab = j.at("landmark_vocab").get<int>();
    c.view_dim = j.at("view_dim").get<int>();
    c.min_separation = j.at("min_separation").get<double>();
    c.extra_edge_prob = j.at("extra_edge_prob").get<double>();
    c.extra_edge_radius_factor = j.at("extra_edge_radius_factor").get<double>();
    c.view_noise_std = j.at("view_noise_std").get<double>();
    return c;
}

inline void write_worlds(std::ostream& os, const std::vector<world::NavGraph>& worlds) {
    for (const world::NavGraph& g : worlds) {
        json header{{"version", kFormatVersion},
                    {"world_id", g.world_id},
                    {"node_count", g.node_count()},
                    {"edge_count", g.edge_count()},
                    {"config", world_config_to_json(g.config)}};
        os << header.dump() << "\n";
        for (NodeId v : g.nodes) {
            json node{{"id", v},
                      {"pos", {g.positions[v].x, g.positions[v].y}},
                      {"landmark", g.landmarks[v]},
                      {"feature", g.view_features[v]}};
            os << node.dump() << "\n";
        }
        for (const auto& [u, nb] : g.adj)
            for (const auto& [v, len] : nb)
                if (u < v) os << json{{"u", u}, {"v", v}, {"length", len}}.dump() << "\n";
    }
}

inline std::vector<world::NavGraph> read_worlds(std::istream& is) {
    std::vector<world::NavGraph> out;
    world::NavGraph* cur = nullptr;
    int expect_nodes = 0;
    std::size_t expect_edges = 0;
    auto check_complete = [&]() {
        if (!cur) return;
        if (cur->node_count() != expect_nodes)
            throw IoError("world " + std::to_string(cur->world_id) + ": node count mismatch");
        if (cur->edge_count() != expect_edges)
            throw IoError("world " + std::to_string(cur->world_id) + ": edge count mismatch");
    };
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = "world file line " + std::to_string(lineno) + ": ";
        try {
            const json j = json::parse(line);
            if (j.contains("version")) {  // header
                const int ver = j.at("version").get<int>();
                if (ver != kFormatVersion)
                    throw IoError("unsupported world format version " + std::to_string(ver));
                check_complete();
                world::NavGraph g;
                g.world_id = j.at("world_id").get<std::uint64_t>();
                g.config = world_config_from_json(j.at("config"));
                expect_nodes = j.at("node_count").get<int>();
                expect_edges = j.at("edge_count").get<std::size_t>();
                g.nodes.reserve(expect_nodes);
                out.push_back(std::move(g));
                cur = &out.back();
            } else if (j.contains("id")) {  // node
                if (!cur) throw IoError(where + "node before header");
                const auto v = j.at("id").get<NodeId>();
                if (v != static_cast<NodeId>(cur->nodes.size()))
                    throw IoError(where + "node ids must be dense and ordered");
                cur->nodes.push_back(v);
                const auto& p = j.at("pos");
                cur->positions.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
                cur->landmarks.push_back(j.at("landmark").get<int>());
                cur->view_features.push_back(j.at("feature").get<std::vector<double>>());
            } else if (j.contains("u")) {  // edge
                if (!cur) throw IoError(where + "edge before header");
                const auto u = j.at("u").get<NodeId>();
                const auto v = j.at("v").get<NodeId>();
                const double len = j.at("length").get<double>();
                if (!cur->has_node(u) || !cur->has_node(v))
                    throw IoError(where + "edge references unknown node");
                if (len <= 0.0) throw IoError(where + "edge length must be positive");
                cur->adj[u][v] = len;
                cur->adj[v][u] = len;
            } else {
                throw IoError(where + "unrecognized record");
            }
        } catch (const json::exception& e) {
            throw IoError(where + e.what());
        }
    }
    check_complete();
    return out;
}

inline void write_episodes(std::ostream& os, const std::vector<world::Episode>& eps) {
    for (const world::Episode& e : eps) {
        json j{{"version", kFormatVersion},
               {"world_id", e.world_id},
               {"episode_id", e.episode_id},
               {"start", e.start},
               {"goal", e.goal},
               {"gt_path", e.gt_path},
               {"instruction", e.instruction},
               {"success_radius", e.success_radius}};
        os << j.dump() << "\n";
    }
}

inline std::vector<world::Episode> read_episodes(std::istream& is) {
    std::vector<world::Episode> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            const int ver = j.at("version").get<int>();
            if (ver != kFormatVersion)
                throw IoError("unsupported episode format version " + std::to_string(ver));
            world::Episode e;
            e.world_id = j.at("world_id").get<std::uint64_t>();
            e.episode_id = j.at("episode_id").get<std::uint64_t>();
            e.start = j.at("start").get<NodeId>();
            e.goal = j.at("goal").get<NodeId>();
            e.gt_path = j.at("gt_path").get<std::vector<NodeId>>();
            e.instruction = j.at("instruction").get<std::vector<int>>();
            e.success_radius = j.at("success_radius").get<double>();
            out.push_back(std::move(e));
        } catch (const json::exception& e) {
            throw IoError("episode file line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// file-path conveniences

inline void save_worlds(const std::string& path, const std::vector<world::NavGraph>& worlds) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    write_worlds(os, worlds);
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<world::NavGraph> load_worlds(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    return read_worlds(is);
}

inline void save_episodes(const std::string& path, const std::vector<world::Episode>& eps) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    write_episodes(os, eps);
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<world::Episode> load_episodes(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    return read_episodes(is);
}

}  // namespace atd::io
