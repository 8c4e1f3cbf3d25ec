#pragma once

// Evaluation metrics over walked trajectories: trajectory length, navigation
// error, success, oracle success, and path-length-weighted success, plus
// arithmetic-mean aggregation across an episode set.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "atd/common.hpp"
#include "atd/graphworld.hpp"

namespace atd::metrics {

/// Default success threshold in meters.
inline constexpr double kDefaultEpsilon = 3.0;

/// Sum of shortest-path distances between consecutive viewpoints. For a
/// trajectory that only walks edges this equals the walked length, but any
/// connected pair is accepted.
inline double trajectory_length(const world::NavGraph& g, const std::vector<NodeId>& path) {
    require(!path.empty(), "trajectory_length: empty path");
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < path.size(); ++i)
        total += world::shortest_distance(g, path[i], path[i + 1]);
    return total;
}

/// Shortest-path distance from the final viewpoint to the goal.
inline double navigation_error(const world::NavGraph& g, const std::vector<NodeId>& path,
                               NodeId goal) {
    require(!path.empty(), "navigation_error: empty path");
    return world::shortest_distance(g, path.back(), goal);
}

/// S = 1 iff the final viewpoint lies strictly within eps of the goal.
inline int success(const world::NavGraph& g, const std::vector<NodeId>& path, NodeId goal,
                   double eps = kDefaultEpsilon) {
    require(eps > 0.0, "success: eps must be > 0");
    return navigation_error(g, path, goal) < eps ? 1 : 0;
}

/// S_oracle = 1 iff any viewpoint along the path lies strictly within eps.
inline int oracle_success(const world::NavGraph& g, const std::vector<NodeId>& path, NodeId goal,
                          double eps = kDefaultEpsilon) {
    require(eps > 0.0, "oracle_success: eps must be > 0");
    require(!path.empty(), "oracle_success: empty path");
    for (NodeId v : path)
        if (world::shortest_distance(g, v, goal) < eps) return 1;
    return 0;
}

/// Goal-set variant kept for forward compatibility: success against the
/// nearest member of a goal set.
inline int success_goal_set(const world::NavGraph& g, const std::vector<NodeId>& path,
                            const std::vector<NodeId>& goals, double eps = kDefaultEpsilon) {
    require(!goals.empty(), "success_goal_set: empty goal set");
    for (NodeId goal : goals)
        if (success(g, path, goal, eps)) return 1;
    return 0;
}

/// SPL = S * L_gt / max(L_traj, L_gt).
inline double spl(int s, double l_gt, double l_traj) {
    require(l_gt > 0.0, "spl: ground-truth length must be > 0, got ", l_gt);
    require(l_traj >= 0.0, "spl: trajectory length must be >= 0");
    if (s == 0) return 0.0;
    return static_cast<double>(s) * l_gt / std::max(l_traj, l_gt);
}

/// One walked trajectory tied to the episode that produced it.
struct TrajectoryRecord {
    world::Episode episode;
    std::vector<NodeId> path;
};

struct EpisodeMetrics {
    std::uint64_t world_id = 0;
    std::uint64_t episode_id = 0;
    double tl = 0.0;
    double ne = 0.0;
    int s = 0;
    int s_oracle = 0;
    double spl = 0.0;
};

struct MetricsReport {
    double epsilon = kDefaultEpsilon;
    std::vector<EpisodeMetrics> episodes;
    // arithmetic means over the episode rows
    double tl = 0.0;
    double ne = 0.0;
    double sr = 0.0;
    double osr = 0.0;
    double spl = 0.0;

    int count() const { return static_cast<int>(episodes.size()); }
};

/// Scores every trajectory against its world and aggregates. Trajectories
/// must start at their episode's start node; unmatched world ids are errors.
inline MetricsReport evaluate(const std::map<std::uint64_t, world::NavGraph>& worlds,
                              const std::vector<TrajectoryRecord>& records,
                              double eps = kDefaultEpsilon) {
    require(eps > 0.0, "evaluate: eps must be > 0");
    require(!records.empty(), "evaluate: no trajectories");
    MetricsReport rep;
    rep.epsilon = eps;
    for (const TrajectoryRecord& rec : records) {
        const world::Episode& ep = rec.episode;
        auto it = worlds.find(ep.world_id);
        require(it != worlds.end(), "evaluate: episode ", ep.episode_id,
                " references unknown world ", ep.world_id);
        const world::NavGraph& g = it->second;
        require(!rec.path.empty(), "evaluate: episode ", ep.episode_id, ": empty trajectory");
        require(rec.path.front() == ep.start, "evaluate: episode ", ep.episode_id,
                ": trajectory starts at ", rec.path.front(), ", episode starts at ", ep.start);

        EpisodeMetrics m;
        m.world_id = ep.world_id;
        m.episode_id = ep.episode_id;
        m.tl = trajectory_length(g, rec.path);
        m.ne = navigation_error(g, rec.path, ep.goal);
        m.s = m.ne < eps ? 1 : 0;
        m.s_oracle = oracle_success(g, rec.path, ep.goal, eps);
        const double l_gt = trajectory_length(g, ep.gt_path);
        m.spl = spl(m.s, l_gt, m.tl);
        rep.episodes.push_back(m);
    }
    const double n = static_cast<double>(rep.episodes.size());
    for (const EpisodeMetrics& m : rep.episodes) {
        rep.tl += m.tl / n;
        rep.ne += m.ne / n;
        rep.sr += m.s / n;
        rep.osr += m.s_oracle / n;
        rep.spl += m.spl / n;
    }
    return rep;
}

inline nlohmann::json report_to_json(const MetricsReport& rep) {
    nlohmann::json eps = nlohmann::json::array();
    for (const EpisodeMetrics& m : rep.episodes) {
        eps.push_back({{"world_id", m.world_id},
                       {"episode_id", m.episode_id},
                       {"tl", m.tl},
                       {"ne", m.ne},
                       {"s", m.s},
                       {"s_oracle", m.s_oracle},
                       {"spl", m.spl}});
    }
    return nlohmann::json{{"epsilon", rep.epsilon},
                          {"count", rep.count()},
                          {"episodes", eps},
                          {"aggregate",
                           {{"tl", rep.tl},
                            {"ne", rep.ne},
                            {"sr", rep.sr},
                            {"osr", rep.osr},
                            {"spl", rep.spl}}}};
}

}  // namespace atd::metrics
