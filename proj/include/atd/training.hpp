#pragma once

// Two-stage trainer. Stage 1 warms up the estimation/imagination branches on
// their auxiliary targets; stage 2 optimizes the navigation policy with
// behaviour cloning plus an interactive-demonstrator loss whose labels come
// from shortest-distance lookups over the agent's partial graph and the
// environment graph. Every random draw derives from the run seed, so a run is
// reproducible bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "atd/brains.hpp"
#include "atd/checkpoint.hpp"
#include "atd/common.hpp"
#include "atd/graphworld.hpp"
#include "atd/metrics.hpp"
#include "atd/policy.hpp"
#include "atd/sgca.hpp"

namespace atd::train {

using nn::Tape;
using nn::ValueId;

// ---------------------------------------------------------------------------
// configuration

enum class Ablation { full, se_only, im_only, baseline };

inline const char* ablation_name(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::se_only: return "se_only";
        case Ablation::im_only: return "im_only";
        case Ablation::baseline: return "baseline";
    }
    fail("unreachable ablation");
}

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "full" || s == "none") return Ablation::full;
    if (s == "se_only") return Ablation::se_only;
    if (s == "im_only") return Ablation::im_only;
    if (s == "baseline") return Ablation::baseline;
    fail("unknown ablation '", s, "' (want none|se_only|im_only|baseline)");
}

/// The three component configs plus the ablation switch. Widths must agree:
/// the policy consumes imagination rows of its own embedding size.
struct ModelConfig {
    brains::BrainConfig brain;
    sgca::SgcaConfig grounding;
    policy::PolicyConfig pol;
    Ablation ablation = Ablation::full;

    bool has_left() const { return ablation == Ablation::full || ablation == Ablation::se_only; }
    bool has_right() const { return ablation == Ablation::full || ablation == Ablation::im_only; }

    void validate() const {
        brain.validate();
        grounding.validate();
        pol.validate();
        require(brain.d_m == pol.d_m, "model: brain d_m ", brain.d_m, " vs policy d_m ", pol.d_m);
        require(grounding.d_m == brain.d_m, "model: grounding d_m ", grounding.d_m,
                " vs brain d_m ", brain.d_m);
        require(grounding.d == pol.d_m, "model: grounding output ", grounding.d,
                " vs policy d_m ", pol.d_m);
        require(brain.view_dim == pol.view_dim, "model: brain view_dim ", brain.view_dim,
                " vs policy view_dim ", pol.view_dim);
    }
};

inline void register_model(nn::ParamStore& s, const ModelConfig& mc) {
    mc.validate();
    brains::register_instruction_encoder(s, mc.brain);
    if (mc.has_left()) brains::register_left_brain(s, mc.brain);
    if (mc.has_right()) brains::register_right_brain(s, mc.brain);
    if (mc.ablation != Ablation::baseline) sgca::register_sgca(s, mc.grounding);
    if (mc.ablation == Ablation::im_only)
        s.create("sgca.query_const", mc.brain.state_tokens, mc.grounding.d_m, nn::Init::xavier);
    // the baseline row runs without injection, so those weights do not exist
    policy::register_policy(s, mc.pol, mc.ablation != Ablation::baseline);
}

struct TrainConfig {
    std::uint64_t seed = 1;
    int batch_size = 2;
    double learning_rate = 1e-5;
    double weight_decay = 0.05;
    double lambda_bc = 1.0;  // loss trade-off: total = lambda * bc + pid
    int n_layers_sgca = 4;
    bool brain_freeze = true;  // freeze both branches after warm-up
    int warmup_steps = 5000;
    int max_steps = 20000;
    int eval_every = 1000;
    int eval_episodes_per_world = 2;
    int max_eval_worlds = 50;
    int step_cap = 15;  // rollout truncation, sampled and greedy alike
    bool pid_memory_only_labels = false;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int ep_min_hops = 3;
    int ep_max_hops = 7;
    double success_radius = 3.0;
    std::string log_dir;  // optional: JSONL log, checkpoints, failure dumps

    void validate() const {
        require(lambda_bc >= 0.0, "train: lambda must be >= 0");
        require(learning_rate > 0.0, "train: learning rate must be > 0");
        require(batch_size >= 1, "train: batch_size must be >= 1");
        require(warmup_steps >= 0 && max_steps >= 0, "train: negative step counts");
        require(eval_every > 0, "train: eval_every must be > 0");
        require(step_cap >= 1, "train: step_cap must be >= 1");
        require(eval_episodes_per_world >= 1 && max_eval_worlds >= 1, "train: empty eval plan");
        require(ep_min_hops >= 1 && ep_max_hops >= ep_min_hops, "train: bad episode hop bounds");
        require(success_radius > 0.0, "train: success_radius must be > 0");
    }
};

// ---------------------------------------------------------------------------
// logging

struct StepLog {
    int step = 0;
    double loss_bc = 0.0;
    double loss_pid = 0.0;
    double loss_total = 0.0;
    double grad_norm = 0.0;
};

struct WarmupLog {
    int step = 0;
    double loss_left = 0.0;
    double loss_right = 0.0;
    double loss_total = 0.0;
    double grad_norm = 0.0;
};

struct EvalLog {
    int step = 0;
    metrics::MetricsReport seen;
    metrics::MetricsReport unseen;
};

struct TrainLog {
    std::vector<WarmupLog> warmup;
    std::vector<StepLog> steps;
    std::vector<EvalLog> evals;
    int best_step = -1;
    double best_unseen_sr = -1.0;

    void check() const {
        int prev = 0;
        for (const auto& s : steps) {
            require(s.step > prev || (prev == 0 && s.step > 0), "train log: steps not increasing");
            prev = s.step;
        }
    }
};

inline nlohmann::json step_log_json(const StepLog& s) {
    return {{"kind", "step"},           {"step", s.step},
            {"loss_bc", s.loss_bc},     {"loss_pid", s.loss_pid},
            {"loss_total", s.loss_total}, {"grad_norm", s.grad_norm}};
}

inline nlohmann::json warmup_log_json(const WarmupLog& s) {
    return {{"kind", "warmup"},         {"step", s.step},
            {"loss_left", s.loss_left}, {"loss_right", s.loss_right},
            {"loss_total", s.loss_total}, {"grad_norm", s.grad_norm}};
}

inline nlohmann::json eval_log_json(const EvalLog& e) {
    nlohmann::json j{{"kind", "eval"}, {"step", e.step}};
    if (e.seen.count() > 0) j["seen"] = metrics::report_to_json(e.seen);
    if (e.unseen.count() > 0) j["unseen"] = metrics::report_to_json(e.unseen);
    return j;
}

/// Full log as JSON lines, in recording order (warmup, then interleaved
/// step/eval records sorted by step).
inline std::string train_log_to_jsonl(const TrainLog& log) {
    std::string out;
    for (const auto& w : log.warmup) out += warmup_log_json(w).dump() + "\n";
    std::size_t e = 0;
    for (const auto& s : log.steps) {
        out += step_log_json(s).dump() + "\n";
        while (e < log.evals.size() && log.evals[e].step <= s.step)
            out += eval_log_json(log.evals[e++]).dump() + "\n";
    }
    while (e < log.evals.size()) out += eval_log_json(log.evals[e++]).dump() + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// model forward helpers

/// Mean of the stored embeddings of visited (and current) nodes; zeros before
/// the first step.
inline ValueId visited_summary(Tape& t, const ModelConfig& mc, const policy::TopoMemory& mem) {
    std::vector<ValueId> rows;
    for (const auto& [id, n] : mem.nodes)
        if (n.status != policy::NodeStatus::frontier && n.v_vis >= 0) rows.push_back(n.v_vis);
    if (rows.empty()) return t.input(Mat::Zero(1, mc.pol.d_m));
    return t.mean_rows(t.concat_rows(rows));
}

/// Per-candidate imagination rows fed into the policy memory, or -1 when the
/// ablation provides none. The single-branch rows keep the grounding stack
/// and stub out the missing side: se_only feeds it a zero imagination stream,
/// im_only swaps the state queries for a learned constant matrix.
inline ValueId imagination_vectors(Tape& t, const ModelConfig& mc,
                                   const brains::InstructionEmbedding& instr,
                                   const std::vector<world::Observation>& obs, ValueId visited,
                                   sgca::RecordMeta meta,
                                   std::vector<sgca::AttentionRecord>* attn_sink = nullptr) {
    if (mc.ablation == Ablation::baseline) return -1;
    const auto n = static_cast<Eigen::Index>(obs.size());

    brains::StateEmbedding st;
    if (mc.has_left()) {
        st = brains::left_brain_forward(t, mc.brain, instr, obs, visited);
    } else {
        st.tokens = t.param("sgca.query_const");
    }
    brains::ImaginationEmbedding im;
    if (mc.has_right()) {
        im = brains::right_brain_forward(t, mc.brain, instr, obs);
    } else {
        im.groups = t.input(Mat::Zero(n * mc.brain.group_tokens, mc.brain.d_m));
        im.n_candidates = static_cast<int>(n);
        im.group_tokens = mc.brain.group_tokens;
    }
    sgca::SgcaOutput out = sgca::sgca_stack(t, mc.grounding, st, im, meta);
    if (attn_sink) attn_sink->insert(attn_sink->end(), out.records.begin(), out.records.end());
    return out.v_atd;
}

namespace detail {

/// Shortest node sequence a..b over memory edges; Dijkstra with NodeId
/// tie-breaking, mirroring the world-graph routine.
inline std::vector<NodeId> memory_path(const policy::TopoMemory& mem, NodeId a, NodeId b) {
    require(mem.has_node(a) && mem.has_node(b), "memory path: unknown endpoint");
    if (a == b) return {a};
    std::map<NodeId, double> dist;
    std::map<NodeId, NodeId> parent;
    for (const auto& [id, n] : mem.nodes) dist[id] = std::numeric_limits<double>::infinity();
    dist[a] = 0.0;
    std::set<std::pair<double, NodeId>> queue{{0.0, a}};
    while (!queue.empty()) {
        auto [d, u] = *queue.begin();
        queue.erase(queue.begin());
        if (u == b) break;
        auto it = mem.adj.find(u);
        if (it == mem.adj.end()) continue;
        for (const auto& [v, len] : it->second) {
            const double nd = d + len;
            const bool better = nd < dist[v] - 1e-15 ||
                                (std::abs(nd - dist[v]) <= 1e-15 && parent.count(v) &&
                                 u < parent[v]);
            if (!better) continue;
            queue.erase({dist[v], v});
            dist[v] = nd;
            parent[v] = u;
            queue.insert({nd, v});
        }
    }
    require(std::isfinite(dist[b]), "memory path: ", a, " cannot reach ", b);
    std::vector<NodeId> path{b};
    while (path.back() != a) path.push_back(parent.at(path.back()));
    std::reverse(path.begin(), path.end());
    return path;
}

/// Walks the agent from `at` to scored action `action`, appending traversed
/// nodes (DUET-style travel through the known graph) and returning the new
/// heading. Memory edges are observed world edges, so bearings are exact.
inline double move_to(const world::NavGraph& g, const policy::TopoMemory& mem, NodeId& at,
                      NodeId action, std::vector<NodeId>& walked) {
    std::vector<NodeId> leg = mem.has_edge(at, action) ? std::vector<NodeId>{at, action}
                                                       : memory_path(mem, at, action);
    for (std::size_t i = 1; i < leg.size(); ++i) walked.push_back(leg[i]);
    at = action;
    return world::edge_bearing(g, leg[leg.size() - 2], leg.back());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// losses

/// Teacher-forced behaviour cloning: -sum log pi(gt action) along gt_path,
/// with STOP as the final target. Only node observations enter the features;
/// the world graph is never queried beyond them.
inline ValueId bc_loss(Tape& t, const ModelConfig& mc, const world::NavGraph& g,
                       const world::Episode& ep,
                       std::vector<sgca::AttentionRecord>* attn_sink = nullptr) {
    require(!ep.gt_path.empty() && ep.gt_path.front() == ep.start,
            "bc: episode path must begin at start");
    brains::InstructionEmbedding instr = brains::encode_instruction(t, mc.brain, ep.instruction);
    policy::TopoMemory mem;
    double heading = 0.0;
    ValueId total = -1;
    for (std::size_t k = 0; k < ep.gt_path.size(); ++k) {
        const NodeId at = ep.gt_path[k];
        auto obs = world::observations(g, at, heading);
        ValueId vsum = visited_summary(t, mc, mem);
        ValueId vatd = imagination_vectors(t, mc, instr, obs, vsum,
                                           {static_cast<int>(k), ep.episode_id}, attn_sink);
        policy::update_topo_memory(t, mc.pol, mem, at, obs, vatd, static_cast<int>(k));
        policy::ActionDistribution dist = policy::predict_action(t, mc.pol, mem, instr);
        const NodeId target = k + 1 < ep.gt_path.size() ? ep.gt_path[k + 1] : kStopAction;
        ValueId step_loss =
            t.ce_with_logits(dist.logits, static_cast<int>(dist.index_of(target)));
        total = total < 0 ? step_loss : t.add(total, step_loss);
        if (k + 1 < ep.gt_path.size()) heading = world::edge_bearing(g, at, ep.gt_path[k + 1]);
    }
    return total;
}

/// Next-target label from the partial graph: the candidate minimizing
/// d_memory(current, v) + d_world(v, goal); STOP once the current node is
/// within the success radius. memory_only scores d(v, goal) over memory edges
/// too whenever the goal is already mapped (comparison mode).
inline NodeId pseudo_label(const policy::TopoMemory& mem, const world::NavGraph& g, NodeId goal,
                           double success_radius, bool memory_only = false) {
    g.check_node(goal);
    require(mem.has_node(mem.current), "pseudo label: memory has no current node");
    if (world::shortest_distance(g, mem.current, goal) < success_radius) return kStopAction;

    std::vector<NodeId> candidates = mem.frontier_ids();
    if (candidates.empty()) {
        // fully explored neighborhood: fall back to visited nodes so the
        // demonstrator can route back through the memory graph
        for (const auto& [id, n] : mem.nodes)
            if (n.status == policy::NodeStatus::visited) candidates.push_back(id);
    }
    require(!candidates.empty(), "pseudo label: no candidate nodes before STOP");

    NodeId best = candidates.front();
    double best_score = std::numeric_limits<double>::infinity();
    for (NodeId v : candidates) {  // ascending ids: ties keep the smallest
        double to_goal;
        if (memory_only && mem.has_node(goal) && std::isfinite(mem.dist.at(v).at(goal)))
            to_goal = mem.dist.at(v).at(goal);
        else
            to_goal = world::shortest_distance(g, v, goal);
        const double score = mem.dist.at(mem.current).at(v) + to_goal;
        if (score < best_score - 1e-12) {
            best_score = score;
            best = v;
        }
    }
    return best;
}

/// One decision of a sampled rollout, kept for replay-style verification.
struct PidStep {
    int step = 0;
    NodeId current = 0;
    NodeId label = 0;
    NodeId sampled = 0;
    double label_prob = 0.0;
    policy::TopoMemory memory;  // state *after* this step's observations
};

struct PidResult {
    ValueId loss = -1;
    std::vector<PidStep> steps;
    std::vector<NodeId> walked;
    bool stopped = false;
};

/// On-policy rollout scored against the pseudo labels. Samples from pi with a
/// seed-derived stream; terminates on a sampled STOP or after step_cap
/// decisions, truncation is not an error.
inline PidResult pid_rollout_loss(Tape& t, const ModelConfig& mc, const world::NavGraph& g,
                                  const world::Episode& ep, std::uint64_t seed, int step_cap = 15,
                                  bool memory_only_labels = false) {
    require(step_cap >= 1, "pid: step_cap must be >= 1");
    Rng rng(derive_seed(seed, "pid", ep.episode_id));
    brains::InstructionEmbedding instr = brains::encode_instruction(t, mc.brain, ep.instruction);

    PidResult out;
    policy::TopoMemory mem;
    NodeId at = ep.start;
    double heading = 0.0;
    out.walked.push_back(at);
    for (int step = 0; step < step_cap; ++step) {
        auto obs = world::observations(g, at, heading);
        ValueId vsum = visited_summary(t, mc, mem);
        ValueId vatd =
            imagination_vectors(t, mc, instr, obs, vsum, {step, ep.episode_id}, nullptr);
        policy::update_topo_memory(t, mc.pol, mem, at, obs, vatd, step);
        policy::ActionDistribution dist = policy::predict_action(t, mc.pol, mem, instr);

        const NodeId label = pseudo_label(mem, g, ep.goal, ep.success_radius, memory_only_labels);
        ValueId step_loss = t.ce_with_logits(dist.logits, static_cast<int>(dist.index_of(label)));
        out.loss = out.loss < 0 ? step_loss : t.add(out.loss, step_loss);

        // inverse-CDF draw over the scored actions, in their fixed order
        const double u = rng.uniform(0.0, 1.0);
        double acc = 0.0;
        NodeId action = dist.order.back();
        for (NodeId cand : dist.order) {
            acc += dist.probs.at(cand);
            if (u < acc) {
                action = cand;
                break;
            }
        }

        PidStep snap;
        snap.step = step;
        snap.current = at;
        snap.label = label;
        snap.sampled = action;
        snap.label_prob = dist.probs.at(label);
        snap.memory = mem;
        out.steps.push_back(std::move(snap));

        if (action == kStopAction) {
            out.stopped = true;
            break;
        }
        heading = detail::move_to(g, mem, at, action, out.walked);
    }
    return out;
}

/// Greedy argmax rollout for evaluation; returns the walked trajectory.
inline metrics::TrajectoryRecord eval_rollout(nn::ParamStore& store, const ModelConfig& mc,
                                              const world::NavGraph& g, const world::Episode& ep,
                                              int step_cap = 15,
                                              std::vector<sgca::AttentionRecord>* attn_sink = nullptr) {
    Tape t(&store, false);
    brains::InstructionEmbedding instr = brains::encode_instruction(t, mc.brain, ep.instruction);
    policy::TopoMemory mem;
    NodeId at = ep.start;
    double heading = 0.0;
    std::vector<NodeId> walked{at};
    for (int step = 0; step < step_cap; ++step) {
        auto obs = world::observations(g, at, heading);
        ValueId vsum = visited_summary(t, mc, mem);
        ValueId vatd =
            imagination_vectors(t, mc, instr, obs, vsum, {step, ep.episode_id}, attn_sink);
        policy::update_topo_memory(t, mc.pol, mem, at, obs, vatd, step);
        policy::ActionDistribution dist = policy::predict_action(t, mc.pol, mem, instr);
        if (dist.argmax == kStopAction) break;
        heading = detail::move_to(g, mem, at, dist.argmax, walked);
    }
    return {ep, walked};
}

// ---------------------------------------------------------------------------
// episode sampling (rejection-free: the valid pair set is enumerated once)

namespace detail {

struct EpisodePlan {
    const world::NavGraph* graph = nullptr;
    std::vector<std::pair<NodeId, NodeId>> pairs;  // (start, goal) within hop bounds
};

inline EpisodePlan plan_episodes(const world::NavGraph& g, int min_hops, int max_hops) {
    EpisodePlan plan;
    plan.graph = &g;
    for (NodeId s : g.nodes)
        for (NodeId goal : g.nodes) {
            if (s == goal) continue;
            auto [path, len] = world::shortest_path(g, s, goal);
            const int hops = static_cast<int>(path.size()) - 1;
            if (hops >= min_hops && hops <= max_hops) plan.pairs.emplace_back(s, goal);
        }
    return plan;
}

inline world::Episode make_episode(const EpisodePlan& plan, double success_radius,
                                   std::uint64_t seed, std::uint64_t episode_id) {
    require(!plan.pairs.empty(), "episodes: world ", plan.graph->world_id,
            " has no start/goal pair within the hop bounds");
    Rng rng(seed);
    const auto& [s, goal] =
        plan.pairs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(plan.pairs.size()) - 1))];
    auto [path, len] = world::shortest_path(*plan.graph, s, goal);
    world::Episode ep;
    ep.world_id = plan.graph->world_id;
    ep.episode_id = episode_id;
    ep.start = s;
    ep.goal = goal;
    ep.gt_path = path;
    ep.instruction = world::instruction_for_path(*plan.graph, path);
    ep.success_radius = success_radius;
    return ep;
}

}  // namespace detail

/// Deterministic evaluation episodes for one split: the first max_worlds ids
/// that admit an episode contribute episodes_per_world each, seeded from
/// (seed, split, world, slot). Training-time evaluation and the eval tool
/// both build their sets here, so their reports are comparable one-to-one.
inline std::vector<world::Episode> eval_episode_set(
    const std::map<std::uint64_t, world::NavGraph>& worlds,
    const std::vector<std::uint64_t>& ids, const std::string& split, std::uint64_t seed,
    int episodes_per_world, int max_worlds, int min_hops, int max_hops, double success_radius) {
    require(episodes_per_world >= 1 && max_worlds >= 1, "eval episodes: empty plan");
    std::vector<world::Episode> eps;
    int used = 0;
    for (std::uint64_t id : ids) {
        if (used >= max_worlds) break;
        require(worlds.count(id) == 1, "eval episodes: unknown world ", id);
        auto plan = detail::plan_episodes(worlds.at(id), min_hops, max_hops);
        if (plan.pairs.empty()) continue;
        ++used;
        for (int j = 0; j < episodes_per_world; ++j) {
            const std::uint64_t es = derive_seed(seed, "eval-ep:" + split + ":" +
                                                           std::to_string(id) + ":" +
                                                           std::to_string(j));
            eps.push_back(detail::make_episode(plan, success_radius, es, es));
        }
    }
    return eps;
}

// ---------------------------------------------------------------------------
// warm-up loss

struct WarmupLoss {
    ValueId left = -1;   // -1 when the ablation lacks the branch
    ValueId right = -1;
};

/// Teacher-forced pass along gt_path scoring the auxiliary heads: the hop
/// index (clamped to the progress-class range) for the estimation branch and
/// each candidate's landmark for the imagination branch. Losses are means
/// over the walked steps.
inline WarmupLoss warmup_episode_loss(Tape& t, const ModelConfig& mc, const world::NavGraph& g,
                                      const world::Episode& ep) {
    require(mc.has_left() || mc.has_right(), "warm-up: ablation has no branches to train");
    brains::InstructionEmbedding instr = brains::encode_instruction(t, mc.brain, ep.instruction);
    policy::TopoMemory mem;
    double heading = 0.0;
    ValueId left_sum = -1, right_sum = -1;
    for (std::size_t k = 0; k < ep.gt_path.size(); ++k) {
        const NodeId at = ep.gt_path[k];
        auto obs = world::observations(g, at, heading);
        ValueId vsum = visited_summary(t, mc, mem);
        if (mc.has_left()) {
            brains::StateEmbedding st = brains::left_brain_forward(t, mc.brain, instr, obs, vsum);
            const int hop = std::min(static_cast<int>(k), mc.brain.progress_classes - 1);
            ValueId l = t.ce_with_logits(st.aux_progress_logits, hop);
            left_sum = left_sum < 0 ? l : t.add(left_sum, l);
        }
        if (mc.has_right()) {
            brains::ImaginationEmbedding im = brains::right_brain_forward(t, mc.brain, instr, obs);
            ValueId cand_sum = -1;
            for (std::size_t i = 0; i < obs.size(); ++i) {
                ValueId r = t.ce_with_logits(
                    t.slice_rows(im.aux_landmark_logits, static_cast<Eigen::Index>(i), 1),
                    g.landmarks[static_cast<std::size_t>(obs[i].candidate_id)]);
                cand_sum = cand_sum < 0 ? r : t.add(cand_sum, r);
            }
            ValueId r = t.scale(cand_sum, 1.0 / static_cast<double>(obs.size()));
            right_sum = right_sum < 0 ? r : t.add(right_sum, r);
        }
        policy::update_topo_memory(t, mc.pol, mem, at, obs, -1, static_cast<int>(k));
        if (k + 1 < ep.gt_path.size()) heading = world::edge_bearing(g, at, ep.gt_path[k + 1]);
    }
    const double inv = 1.0 / static_cast<double>(ep.gt_path.size());
    WarmupLoss out;
    if (left_sum >= 0) out.left = t.scale(left_sum, inv);
    if (right_sum >= 0) out.right = t.scale(right_sum, inv);
    return out;
}

// ---------------------------------------------------------------------------
// config serialization (checkpoint manifests, run manifests)

inline nlohmann::json model_config_json(const ModelConfig& mc) {
    return {{"ablation", ablation_name(mc.ablation)},
            {"brain",
             {{"d_m", mc.brain.d_m},
              {"n_heads", mc.brain.n_heads},
              {"n_blocks", mc.brain.n_blocks},
              {"state_tokens", mc.brain.state_tokens},
              {"group_tokens", mc.brain.group_tokens},
              {"progress_classes", mc.brain.progress_classes},
              {"landmark_vocab", mc.brain.landmark_vocab},
              {"view_dim", mc.brain.view_dim},
              {"ffn_mult", mc.brain.ffn_mult}}},
            {"grounding",
             {{"d_m", mc.grounding.d_m},
              {"d", mc.grounding.d},
              {"n_layers", mc.grounding.n_layers},
              {"tau", mc.grounding.tau}}},
            {"policy",
             {{"d_m", mc.pol.d_m},
              {"n_heads", mc.pol.n_heads},
              {"l_x", mc.pol.l_x},
              {"view_dim", mc.pol.view_dim},
              {"dist_clip", mc.pol.dist_clip},
              {"score_visited", mc.pol.score_visited}}}};
}

/// Inverse of model_config_json; rebuilds the exact architecture a checkpoint
/// manifest records. Unknown fields are rejected by the json library's at().
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig mc;
    try {
        mc.ablation = ablation_from_string(j.at("ablation").get<std::string>());
        const nlohmann::json& b = j.at("brain");
        mc.brain.d_m = b.at("d_m").get<int>();
        mc.brain.n_heads = b.at("n_heads").get<int>();
        mc.brain.n_blocks = b.at("n_blocks").get<int>();
        mc.brain.state_tokens = b.at("state_tokens").get<int>();
        mc.brain.group_tokens = b.at("group_tokens").get<int>();
        mc.brain.progress_classes = b.at("progress_classes").get<int>();
        mc.brain.landmark_vocab = b.at("landmark_vocab").get<int>();
        mc.brain.view_dim = b.at("view_dim").get<int>();
        mc.brain.ffn_mult = b.at("ffn_mult").get<int>();
        const nlohmann::json& g = j.at("grounding");
        mc.grounding.d_m = g.at("d_m").get<Eigen::Index>();
        mc.grounding.d = g.at("d").get<Eigen::Index>();
        mc.grounding.n_layers = g.at("n_layers").get<int>();
        mc.grounding.tau = g.at("tau").get<double>();
        const nlohmann::json& p = j.at("policy");
        mc.pol.d_m = p.at("d_m").get<Eigen::Index>();
        mc.pol.n_heads = p.at("n_heads").get<int>();
        mc.pol.l_x = p.at("l_x").get<int>();
        mc.pol.view_dim = p.at("view_dim").get<int>();
        mc.pol.dist_clip = p.at("dist_clip").get<double>();
        mc.pol.score_visited = p.at("score_visited").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("model config json: ") + e.what());
    }
    mc.validate();
    return mc;
}

inline nlohmann::json train_config_json(const TrainConfig& tc) {
    return {{"seed", tc.seed},
            {"batch_size", tc.batch_size},
            {"learning_rate", tc.learning_rate},
            {"weight_decay", tc.weight_decay},
            {"lambda", tc.lambda_bc},
            {"n_layers_sgca", tc.n_layers_sgca},
            {"brain_freeze", tc.brain_freeze},
            {"warmup_steps", tc.warmup_steps},
            {"max_steps", tc.max_steps},
            {"eval_every", tc.eval_every},
            {"eval_episodes_per_world", tc.eval_episodes_per_world},
            {"max_eval_worlds", tc.max_eval_worlds},
            {"step_cap", tc.step_cap},
            {"pid_memory_only_labels", tc.pid_memory_only_labels},
            {"ep_min_hops", tc.ep_min_hops},
            {"ep_max_hops", tc.ep_max_hops},
            {"success_radius", tc.success_radius}};
}

// ---------------------------------------------------------------------------
// gradient check harness

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::string component;
    double step_h = 1e-5;
    bool linear_mode = false;
    std::vector<GradCheckEntry> entries;
    double max_err = 0.0;

    bool pass(double tol) const { return max_err < tol; }
};

namespace detail {

template <class Build>
inline GradCheckReport fd_report(const std::string& component, nn::ParamStore& store,
                                 Build&& build, double h, bool linear_mode) {
    GradCheckReport rep;
    rep.component = component;
    rep.step_h = h;
    rep.linear_mode = linear_mode;

    Tape grad_tape(&store, true);
    grad_tape.linear_debug = linear_mode;
    ValueId loss = build(grad_tape);
    grad_tape.backward(loss);
    store.zero_grads();
    grad_tape.flush_param_grads();

    auto eval = [&]() {
        Tape t(&store, false);
        t.linear_debug = linear_mode;
        return t.val(build(t))(0, 0);
    };

    store.for_each([&](const std::string& name, nn::Param& p) {
        GradCheckEntry entry{name, 0.0};
        for (Eigen::Index i = 0; i < p.value.rows(); ++i)
            for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
                const double keep = p.value(i, j);
                p.value(i, j) = keep + h;
                const double up = eval();
                p.value(i, j) = keep - h;
                const double dn = eval();
                p.value(i, j) = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double an = p.grad(i, j);
                const double err =
                    std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
                entry.max_rel_err = std::max(entry.max_rel_err, err);
            }
        rep.entries.push_back(entry);
        rep.max_err = std::max(rep.max_err, entry.max_rel_err);
    });
    return rep;
}

inline Mat fd_fixture(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    Rng rng(seed);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
    return m;
}

inline ModelConfig fd_model_config() {
    ModelConfig mc;
    mc.brain.d_m = 8;
    mc.brain.n_heads = 2;
    mc.brain.n_blocks = 1;
    mc.brain.state_tokens = 2;
    mc.brain.group_tokens = 2;
    mc.brain.progress_classes = 4;
    mc.brain.landmark_vocab = 4;
    mc.brain.view_dim = 4;
    mc.grounding.d_m = 8;
    mc.grounding.d = 8;
    mc.grounding.n_layers = 2;
    mc.pol.d_m = 8;
    mc.pol.n_heads = 2;
    mc.pol.l_x = 1;
    mc.pol.view_dim = 4;
    return mc;
}

inline world::NavGraph fd_world() {
    world::WorldConfig wc;
    wc.node_count = 7;
    wc.landmark_vocab = 4;
    wc.view_dim = 4;
    return world::generate_world(wc, 4242);
}

}  // namespace detail

/// Central-difference verification of analytic gradients on fixed tiny
/// shapes; component selects which parameter group (and loss) is exercised.
/// linear_mode disables the nonlinearities and swaps in quadratic readouts,
/// for which central differences are exact up to roundoff.
inline GradCheckReport grad_check(const std::string& component, double h = 1e-5,
                                  bool linear_mode = false) {
    auto sq = [](Tape& t, ValueId x) { return t.sum_all(t.hadamard(x, x)); };

    if (component == "brains") {
        brains::BrainConfig cfg = detail::fd_model_config().brain;
        nn::ParamStore s(7001);
        brains::register_instruction_encoder(s, cfg);
        brains::register_left_brain(s, cfg);
        brains::register_right_brain(s, cfg);
        world::NavGraph g = detail::fd_world();
        auto obs = world::observations(g, g.nodes[0], 0.0);
        std::vector<int> tokens{1, 6, 2, 7};  // landmark and direction mix
        return detail::fd_report(
            component, s,
            [&](Tape& t) {
                brains::InstructionEmbedding instr = brains::encode_instruction(t, cfg, tokens);
                brains::StateEmbedding st = brains::left_brain_forward(
                    t, cfg, instr, obs, t.input(Mat::Zero(1, cfg.d_m)));
                brains::ImaginationEmbedding im = brains::right_brain_forward(t, cfg, instr, obs);
                if (linear_mode)
                    return t.add(sq(t, st.tokens), sq(t, im.groups));
                brains::BrainTargets targets;
                targets.hop_index = 1;
                targets.candidate_landmarks.assign(obs.size(), 2);
                auto [left, right] = brains::brain_losses(t, st, im, targets);
                return t.add(left, right);
            },
            h, linear_mode);
    }
    if (component == "sgca") {
        sgca::SgcaConfig cfg;
        cfg.d_m = 3;
        cfg.d = 3;
        cfg.n_layers = 2;
        nn::ParamStore s(7002);
        sgca::register_sgca(s, cfg);
        Mat state = detail::fd_fixture(2, 3, 1);
        Mat groups = detail::fd_fixture(4, 3, 2);
        return detail::fd_report(
            component, s,
            [&](Tape& t) {
                brains::StateEmbedding st;
                st.tokens = t.input(state);
                brains::ImaginationEmbedding im;
                im.groups = t.input(groups);
                im.n_candidates = 2;
                im.group_tokens = 2;
                return sq(t, sgca::sgca_stack(t, cfg, st, im).v_atd);
            },
            h, linear_mode);
    }
    if (component == "injection") {
        policy::PolicyConfig cfg = detail::fd_model_config().pol;
        nn::ParamStore s(7003);
        s.create("inject.Wq", cfg.d_m, cfg.d_m, nn::Init::xavier);
        s.create("inject.Wk", cfg.d_m, cfg.d_m, nn::Init::xavier);
        s.create("inject.Wv", cfg.d_m, cfg.d_m, nn::Init::xavier);
        s.create("inject.Wo", cfg.d_m, cfg.d_m, nn::Init::gaussian_scaled, 0.5);
        Mat vis = detail::fd_fixture(3, cfg.d_m, 3);
        Mat atd = detail::fd_fixture(3, cfg.d_m, 4);
        return detail::fd_report(
            component, s,
            [&](Tape& t) {
                std::vector<ValueId> slots;
                for (int i = 0; i < 3; ++i) slots.push_back(t.input(atd.row(i).matrix()));
                return sq(t, policy::inject_latent(t, cfg, t.input(vis), slots));
            },
            h, linear_mode);
    }
    if (component == "gasa") {
        policy::PolicyConfig cfg = detail::fd_model_config().pol;
        nn::ParamStore s(7004);
        s.create("gasa.layer0.Wq", cfg.d_m, cfg.d_m, nn::Init::xavier);
        s.create("gasa.layer0.Wk", cfg.d_m, cfg.d_m, nn::Init::xavier);
        s.create("gasa.layer0.Wv", cfg.d_m, cfg.d_m, nn::Init::xavier);
        s.create("gasa.layer0.We", cfg.n_heads, 1, nn::Init::gaussian_scaled, 0.3);
        nn::register_layer_norm(s, "gasa.layer0.ln", cfg.d_m);
        Mat x = detail::fd_fixture(3, cfg.d_m, 5);
        Mat e(3, 3);
        e << 0, 2, 7, 2, 0, 4, 7, 4, 0;
        return detail::fd_report(
            component, s,
            [&](Tape& t) { return sq(t, policy::gasa_layer(t, cfg, 0, t.input(x), e)); }, h,
            linear_mode);
    }
    if (component == "head") {
        policy::PolicyConfig cfg = detail::fd_model_config().pol;
        nn::ParamStore s(7005);
        nn::register_linear(s, "policy.head1", cfg.d_m, cfg.d_m);
        nn::register_linear(s, "policy.head2", cfg.d_m, 1, true, nn::Init::gaussian_scaled);
        Mat x = detail::fd_fixture(5, cfg.d_m, 6);
        return detail::fd_report(
            component, s,
            [&](Tape& t) {
                ValueId scores = nn::linear(
                    t, "policy.head2", t.relu(nn::linear(t, "policy.head1", t.input(x))));
                ValueId row = t.transpose(scores);
                if (linear_mode) return sq(t, row);
                return t.ce_with_logits(row, 2);
            },
            h, linear_mode);
    }
    if (component == "end_to_end") {
        // teacher-forced two-step episode through the whole stack; sampling
        // paths reuse the same operators, so behaviour cloning covers them
        ModelConfig mc = detail::fd_model_config();
        nn::ParamStore s(7006);
        register_model(s, mc);
        {  // expose the zero-initialized tails to the loss
            Rng r(99);
            Mat& wo = s.get("inject.Wo").value;
            for (Eigen::Index i = 0; i < wo.rows(); ++i)
                for (Eigen::Index j = 0; j < wo.cols(); ++j) wo(i, j) = 0.1 * r.gaussian();
            Mat& hw = s.get("policy.head2.W").value;
            for (Eigen::Index i = 0; i < hw.rows(); ++i) hw(i, 0) = 0.3 * r.gaussian();
        }
        world::NavGraph g = detail::fd_world();
        auto plan = detail::plan_episodes(g, 2, 2);
        world::Episode ep = detail::make_episode(plan, 3.0, derive_seed(7006, "fd-ep"), 1);
        return detail::fd_report(
            component, s, [&](Tape& t) { return bc_loss(t, mc, g, ep); }, h, linear_mode);
    }
    fail("grad_check: unknown component '", component,
         "' (want brains|sgca|injection|gasa|head|end_to_end)");
}

// ---------------------------------------------------------------------------
// the trainer

struct TrainResult {
    TrainLog log;
    nn::ParamStore params;  // final parameters, full precision
    nn::ParamStore best;    // float32-rounded parameters of the best eval
};

namespace detail {

[[noreturn]] inline void nan_abort(const std::string& log_dir, const char* stage, int step,
                                   const world::Episode& ep, double a, double b) {
    nlohmann::json dump{{"stage", stage},          {"step", step},
                        {"world_id", ep.world_id}, {"episode_id", ep.episode_id},
                        {"start", ep.start},       {"goal", ep.goal},
                        {"loss_a", a},             {"loss_b", b}};
    if (!log_dir.empty()) {
        std::ofstream out(std::filesystem::path(log_dir) / "nan_dump.json", std::ios::trunc);
        if (out) out << dump.dump(2) << "\n";
    }
    fail("train: non-finite loss in ", stage, " step ", step, " (world ", ep.world_id,
         ", episode ", ep.episode_id, "): ", dump.dump());
}

inline std::string tag(const char* base, int step, int slot) {
    return std::string(base) + ":" + std::to_string(step) + ":" + std::to_string(slot);
}

}  // namespace detail

/// Two-stage deterministic training run. Stage 1 optimizes the branch
/// auxiliaries; stage 2 optimizes lambda * BC + PID. Evaluation always runs
/// on float32-rounded parameter copies so reported metrics match what the
/// saved checkpoints reproduce.
inline TrainResult train(const TrainConfig& tc, ModelConfig mc,
                         const std::map<std::uint64_t, world::NavGraph>& worlds,
                         const std::vector<std::uint64_t>& train_ids,
                         const std::vector<std::uint64_t>& unseen_ids) {
    tc.validate();
    mc.grounding.n_layers = tc.n_layers_sgca;
    mc.validate();
    require(!train_ids.empty(), "train: no training worlds");
    std::set<std::uint64_t> train_set(train_ids.begin(), train_ids.end());
    for (std::uint64_t id : unseen_ids)
        require(train_set.count(id) == 0, "train: world ", id, " is in both splits");

    // per-world valid (start, goal) pairs; worlds without one are dropped
    std::map<std::uint64_t, detail::EpisodePlan> plans;
    auto usable = [&](const std::vector<std::uint64_t>& ids, const char* split) {
        std::vector<std::uint64_t> keep;
        for (std::uint64_t id : ids) {
            require(worlds.count(id) == 1, "train: unknown world ", id);
            auto plan = detail::plan_episodes(worlds.at(id), tc.ep_min_hops, tc.ep_max_hops);
            if (plan.pairs.empty()) {
                warn_once("train-drop:" + std::to_string(id),
                          std::string("dropping ") + split + " world " + std::to_string(id) +
                              ": no episode fits the hop bounds");
                continue;
            }
            plans.emplace(id, std::move(plan));
            keep.push_back(id);
        }
        return keep;
    };
    const std::vector<std::uint64_t> train_use = usable(train_ids, "train");
    const std::vector<std::uint64_t> unseen_use = usable(unseen_ids, "unseen");
    require(!train_use.empty(), "train: no training world admits an episode");

    nn::ParamStore store(tc.seed);
    register_model(store, mc);

    const std::vector<world::Episode> eval_seen =
        eval_episode_set(worlds, train_use, "seen", tc.seed, tc.eval_episodes_per_world,
                         tc.max_eval_worlds, tc.ep_min_hops, tc.ep_max_hops, tc.success_radius);
    const std::vector<world::Episode> eval_unseen =
        eval_episode_set(worlds, unseen_use, "unseen", tc.seed, tc.eval_episodes_per_world,
                         tc.max_eval_worlds, tc.ep_min_hops, tc.ep_max_hops, tc.success_radius);

    TrainResult res;
    std::ofstream jsonl;
    if (!tc.log_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(tc.log_dir, ec);
        require(!ec, "train: cannot create log dir ", tc.log_dir, ": ", ec.message());
        jsonl.open(std::filesystem::path(tc.log_dir) / "train_log.jsonl", std::ios::trunc);
        require(jsonl.good(), "train: cannot open train_log.jsonl under ", tc.log_dir);
    }
    auto emit = [&](const nlohmann::json& j) {
        if (jsonl.is_open()) jsonl << j.dump() << "\n";
    };
    const nlohmann::json run_config{{"model", model_config_json(mc)},
                                    {"train", train_config_json(tc)}};

    auto pick_episode = [&](const char* phase, int step, int slot) {
        Rng pick(derive_seed(tc.seed, detail::tag(phase, step, slot)));
        const std::uint64_t id =
            train_use[static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(train_use.size()) - 1))];
        const std::uint64_t es =
            derive_seed(tc.seed, detail::tag(phase, step, slot) + ":" + std::to_string(id));
        return detail::make_episode(plans.at(id), tc.success_radius, es, es);
    };

    // ---- stage 1: branch warm-up on auxiliary targets
    if (tc.warmup_steps > 0 && (mc.has_left() || mc.has_right())) {
        store.set_trainable("policy.", false);
        store.set_trainable("inject.", false);
        store.set_trainable("gasa.", false);
        store.set_trainable("sgca.", false);
        for (int step = 1; step <= tc.warmup_steps; ++step) {
            double sum_left = 0.0, sum_right = 0.0;
            for (int slot = 0; slot < tc.batch_size; ++slot) {
                world::Episode ep = pick_episode("warm", step, slot);
                Tape t(&store, true);
                WarmupLoss wl = warmup_episode_loss(t, mc, worlds.at(ep.world_id), ep);
                ValueId total = wl.left >= 0 && wl.right >= 0 ? t.add(wl.left, wl.right)
                                : wl.left >= 0               ? wl.left
                                                             : wl.right;
                const double lv = wl.left >= 0 ? t.val(wl.left)(0, 0) : 0.0;
                const double rv = wl.right >= 0 ? t.val(wl.right)(0, 0) : 0.0;
                if (!std::isfinite(lv) || !std::isfinite(rv))
                    detail::nan_abort(tc.log_dir, "warmup", step, ep, lv, rv);
                t.backward(total, 1.0 / tc.batch_size);
                t.flush_param_grads();
                sum_left += lv;
                sum_right += rv;
            }
            WarmupLog wlog;
            wlog.step = step;
            wlog.loss_left = sum_left / tc.batch_size;
            wlog.loss_right = sum_right / tc.batch_size;
            wlog.loss_total = wlog.loss_left + wlog.loss_right;
            wlog.grad_norm = store.grad_norm();
            store.adamw_step(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps,
                             tc.weight_decay);
            store.zero_grads();
            res.log.warmup.push_back(wlog);
            emit(warmup_log_json(wlog));
        }
        store.set_trainable("", true);
    }
    if (tc.brain_freeze) {  // branches hold their warmed-up weights in stage 2
        store.set_trainable("left.", false);
        store.set_trainable("right.", false);
    }

    // ---- evaluation on float32-rounded copies
    auto run_eval = [&](int step) {
        nn::ParamStore ecopy = store;
        ecopy.round_to_f32();
        EvalLog el;
        el.step = step;
        auto run_split = [&](const std::vector<world::Episode>& eps) {
            metrics::MetricsReport rep;
            if (eps.empty()) return rep;
            std::vector<metrics::TrajectoryRecord> recs;
            recs.reserve(eps.size());
            for (const auto& ep : eps)
                recs.push_back(eval_rollout(ecopy, mc, worlds.at(ep.world_id), ep, tc.step_cap));
            return metrics::evaluate(worlds, recs, tc.success_radius);
        };
        el.seen = run_split(eval_seen);
        el.unseen = run_split(eval_unseen);
        res.log.evals.push_back(el);
        emit(eval_log_json(el));
        const double sr = el.unseen.count() > 0 ? el.unseen.sr
                          : el.seen.count() > 0 ? el.seen.sr
                                                : 0.0;
        if (sr > res.log.best_unseen_sr) {
            res.log.best_unseen_sr = sr;
            res.log.best_step = step;
            res.best = ecopy;
            if (!tc.log_dir.empty())
                ckpt::save_checkpoint(
                    (std::filesystem::path(tc.log_dir) / "ckpt_best").string(), ecopy,
                    run_config, step);
        }
        if (!tc.log_dir.empty())
            ckpt::save_checkpoint(
                (std::filesystem::path(tc.log_dir) / ("ckpt_step" + std::to_string(step)))
                    .string(),
                ecopy, run_config, step);
    };

    // ---- stage 2: policy training
    for (int step = 1; step <= tc.max_steps; ++step) {
        double sum_bc = 0.0, sum_pid = 0.0;
        for (int slot = 0; slot < tc.batch_size; ++slot) {
            world::Episode ep = pick_episode("pol", step, slot);
            const world::NavGraph& g = worlds.at(ep.world_id);
            Tape t(&store, true);
            ValueId bc = bc_loss(t, mc, g, ep);
            PidResult pid =
                pid_rollout_loss(t, mc, g, ep, derive_seed(tc.seed, detail::tag("pid", step, slot)),
                                 tc.step_cap, tc.pid_memory_only_labels);
            const double bv = t.val(bc)(0, 0);
            const double pv = t.val(pid.loss)(0, 0);
            if (!std::isfinite(bv) || !std::isfinite(pv))
                detail::nan_abort(tc.log_dir, "policy", step, ep, bv, pv);
            ValueId total = t.add(t.scale(bc, tc.lambda_bc), pid.loss);
            t.backward(total, 1.0 / tc.batch_size);
            t.flush_param_grads();
            sum_bc += bv;
            sum_pid += pv;
        }
        StepLog sl;
        sl.step = step;
        sl.loss_bc = sum_bc / tc.batch_size;
        sl.loss_pid = sum_pid / tc.batch_size;
        sl.loss_total = tc.lambda_bc * sl.loss_bc + sl.loss_pid;  // the logged identity
        sl.grad_norm = store.grad_norm();
        store.adamw_step(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps,
                         tc.weight_decay);
        store.zero_grads();
        res.log.steps.push_back(sl);
        emit(step_log_json(sl));
        if (step % tc.eval_every == 0 || step == tc.max_steps) run_eval(step);
    }
    if (res.log.evals.empty()) run_eval(tc.max_steps);  // degenerate runs still report

    res.log.check();
    res.params = std::move(store);
    return res;
}

}  // namespace atd::train
