#pragma once

// Topological-memory navigation policy. The agent's partial world graph is
// grown step by step; imagination vectors are fused into node embeddings
// through a zero-initialized cross-attention (so the policy starts exactly at
// the imagination-free baseline), and candidate actions plus STOP are scored
// after distance-aware self-attention over the memory.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "atd/brains.hpp"
#include "atd/common.hpp"
#include "atd/graphworld.hpp"
#include "atd/layers.hpp"

namespace atd::policy {

using nn::Tape;
using nn::ValueId;

struct PolicyConfig {
    int d_m = 128;
    int n_heads = 4;
    int l_x = 2;              // cross-modal rounds (instruction attention + GASA)
    int view_dim = 16;
    double dist_clip = 30.0;  // meter ceiling for the spatial attention bias
    bool score_visited = true;  // allow backtracking onto visited nodes

    void validate() const {
        require(d_m > 0 && n_heads > 0 && d_m % n_heads == 0, "policy: d_m ", d_m,
                " not divisible into ", n_heads, " heads");
        require(l_x >= 1 && l_x <= 8, "policy: l_x out of range: ", l_x);
        require(view_dim > 0, "policy: view_dim must be positive");
        require(dist_clip > 0.0, "policy: dist_clip must be positive");
    }
};

enum class NodeStatus { visited, frontier, current };

// Per-node state held by the memory. Embeddings are tape handles so the whole
// episode stays differentiable; the tape must outlive the memory.
struct MemoryNode {
    NodeStatus status = NodeStatus::frontier;
    ValueId v_vis = -1;
    ValueId v_atd = -1;  // -1: this node was never offered an imagination vector
    int last_step_seen = -1;
};

struct TopoMemory {
    std::map<NodeId, MemoryNode> nodes;
    std::map<NodeId, std::map<NodeId, double>> adj;   // observed edges, meters
    std::map<NodeId, std::map<NodeId, double>> dist;  // all-pairs over adj
    NodeId current = -1;

    bool has_node(NodeId v) const { return nodes.count(v) != 0; }
    bool has_edge(NodeId u, NodeId v) const {
        auto it = adj.find(u);
        return it != adj.end() && it->second.count(v) != 0;
    }
    double edge_length(NodeId u, NodeId v) const {
        require(has_edge(u, v), "memory: no edge ", u, " -- ", v);
        return adj.at(u).at(v);
    }
    std::vector<NodeId> frontier_ids() const {
        std::vector<NodeId> out;
        for (const auto& [id, n] : nodes)
            if (n.status == NodeStatus::frontier) out.push_back(id);
        return out;
    }
    std::size_t count_status(NodeStatus s) const {
        std::size_t k = 0;
        for (const auto& [id, n] : nodes) k += (n.status == s) ? 1 : 0;
        return k;
    }

    // Structural invariants; cheap at memory sizes seen in rollouts.
    void check() const {
        require(count_status(NodeStatus::current) == 1, "memory: want exactly one current node");
        require(has_node(current) && nodes.at(current).status == NodeStatus::current,
                "memory: current id out of sync");
        for (const auto& [id, n] : nodes) {
            if (n.status != NodeStatus::frontier) continue;
            bool anchored = false;
            auto it = adj.find(id);
            if (it != adj.end())
                for (const auto& [nb, len] : it->second)
                    anchored = anchored || nodes.at(nb).status != NodeStatus::frontier;
            require(anchored, "memory: frontier node ", id, " has no visited neighbor");
        }
        for (const auto& [u, row] : dist)
            for (const auto& [v, d] : row) {
                require(std::isfinite(d), "memory: unreachable pair ", u, " -- ", v);
                require(u != v || d == 0.0, "memory: nonzero self-distance at ", u);
                require(std::abs(dist.at(v).at(u) - d) < 1e-9, "memory: asymmetric distances");
            }
    }
};

// ---------------------------------------------------------------------------
// registration

inline void register_policy(nn::ParamStore& s, const PolicyConfig& cfg,
                            bool with_injection = true) {
    cfg.validate();
    const Eigen::Index d = cfg.d_m;
    nn::register_linear(s, "policy.vis_proj", cfg.view_dim, d);
    s.create("policy.stop_emb", 1, d, nn::Init::gaussian_scaled);
    if (with_injection) {
        // latent injection: zero output projection makes fusion the identity
        // map at initialization
        s.create("inject.Wq", d, d, nn::Init::xavier);
        s.create("inject.Wk", d, d, nn::Init::xavier);
        s.create("inject.Wv", d, d, nn::Init::xavier);
        s.create("inject.Wo", d, d, nn::Init::zeros);
    }
    for (int l = 0; l < cfg.l_x; ++l) {
        const std::string r = std::to_string(l);
        nn::register_attention(s, "policy.xattn" + r, d);
        nn::register_layer_norm(s, "policy.xln" + r, d);
        s.create("gasa.layer" + r + ".Wq", d, d, nn::Init::xavier);
        s.create("gasa.layer" + r + ".Wk", d, d, nn::Init::xavier);
        s.create("gasa.layer" + r + ".Wv", d, d, nn::Init::xavier);
        s.create("gasa.layer" + r + ".We", cfg.n_heads, 1, nn::Init::zeros);
        nn::register_layer_norm(s, "gasa.layer" + r + ".ln", d);
    }
    nn::register_linear(s, "policy.head1", d, d);
    // zero head: uniform action distribution at initialization
    nn::register_linear(s, "policy.head2", d, 1, true, nn::Init::zeros);
}

// ---------------------------------------------------------------------------
// node embeddings

/// Projection of the arithmetic mean of the given views.
inline ValueId node_visual_embedding(Tape& t, const std::vector<std::vector<double>>& views) {
    require(!views.empty(), "node embedding: empty view list");
    const std::size_t w = views[0].size();
    Mat mean = Mat::Zero(1, static_cast<Eigen::Index>(w));
    for (const auto& v : views) {
        require(v.size() == w, "node embedding: ragged view widths ", w, " vs ", v.size());
        for (std::size_t j = 0; j < w; ++j) mean(0, static_cast<Eigen::Index>(j)) += v[j];
    }
    mean /= static_cast<double>(views.size());
    return nn::linear(t, "policy.vis_proj", t.input(mean));
}

namespace detail {

inline void recompute_distances(TopoMemory& mem) {
    std::vector<NodeId> ids;
    ids.reserve(mem.nodes.size());
    for (const auto& [id, n] : mem.nodes) ids.push_back(id);
    const std::size_t n = ids.size();
    const double inf = std::numeric_limits<double>::infinity();
    Mat d = Mat::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n), inf);
    std::map<NodeId, std::size_t> pos;
    for (std::size_t i = 0; i < n; ++i) {
        pos[ids[i]] = i;
        d(i, i) = 0.0;
    }
    for (const auto& [u, row] : mem.adj)
        for (const auto& [v, len] : row) d(pos[u], pos[v]) = std::min(d(pos[u], pos[v]), len);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                d(i, j) = std::min(d(i, j), d(i, k) + d(k, j));
    mem.dist.clear();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) mem.dist[ids[i]][ids[j]] = d(i, j);
}

inline void add_memory_edge(TopoMemory& mem, NodeId u, NodeId v, double len) {
    require(len > 0.0, "memory: non-positive edge length ", u, " -- ", v);
    if (mem.has_edge(u, v)) {
        const double prior = mem.adj[u][v];
        require(std::abs(prior - len) <= 1e-6, "memory: edge ", u, " -- ", v,
                " re-observed with length ", len, " but stored ", prior);
        return;
    }
    mem.adj[u][v] = len;
    mem.adj[v][u] = len;
}

}  // namespace detail

/// Advances the memory to `current` and folds in the step's observations.
/// v_atd holds one imagination row per observation (pass -1 to skip, e.g. in
/// imagination-free ablations; existing vectors are then left in place).
inline void update_topo_memory(Tape& t, const PolicyConfig& cfg, TopoMemory& mem, NodeId current,
                               const std::vector<world::Observation>& obs, ValueId v_atd,
                               int step) {
    if (v_atd >= 0) {
        require(t.rows(v_atd) == static_cast<Eigen::Index>(obs.size()),
                "memory: imagination rows ", t.rows(v_atd), " vs ", obs.size(), " observations");
        require(t.cols(v_atd) == cfg.d_m, "memory: imagination width ", t.cols(v_atd), " vs d_m ",
                cfg.d_m);
    }
    if (!mem.nodes.empty()) {
        require(mem.has_node(current), "memory: moved to unobserved node ", current);
        require(mem.nodes[current].status != NodeStatus::current,
                "memory: duplicate update at node ", current);
        mem.nodes[mem.current].status = NodeStatus::visited;
    }

    MemoryNode& cur = mem.nodes[current];
    cur.status = NodeStatus::current;
    cur.last_step_seen = step;
    mem.current = current;

    std::vector<std::vector<double>> panorama;
    panorama.reserve(obs.size());
    for (const auto& o : obs) panorama.push_back(o.view);
    if (!panorama.empty()) cur.v_vis = node_visual_embedding(t, panorama);
    require(cur.v_vis >= 0, "memory: node ", current, " has no views and no prior embedding");

    for (std::size_t i = 0; i < obs.size(); ++i) {
        const auto& o = obs[i];
        require(o.candidate_id != current, "memory: self-observation at ", current);
        MemoryNode& node = mem.nodes[o.candidate_id];
        if (node.last_step_seen < 0) node.status = NodeStatus::frontier;  // visited stays visited
        node.v_vis = node_visual_embedding(t, {o.view});
        if (v_atd >= 0) node.v_atd = t.slice_rows(v_atd, static_cast<Eigen::Index>(i), 1);
        node.last_step_seen = step;
        detail::add_memory_edge(mem, current, o.candidate_id, o.distance);
    }

    detail::recompute_distances(mem);
    mem.check();
}

// ---------------------------------------------------------------------------
// latent injection

/// v_fusion = v_vis + CrossAttention(query = v_vis, key = value = v_atd).
/// Rows without an imagination vector (v_atd[i] == -1) pass through unchanged.
inline ValueId inject_latent(Tape& t, const PolicyConfig& cfg, ValueId v_vis,
                             const std::vector<ValueId>& v_atd) {
    const Eigen::Index n = t.rows(v_vis);
    require(static_cast<Eigen::Index>(v_atd.size()) == n, "injection: ", v_atd.size(),
            " imagination slots for ", n, " nodes");
    std::vector<Eigen::Index> with;
    std::vector<ValueId> kv_rows;
    for (Eigen::Index i = 0; i < n; ++i)
        if (v_atd[static_cast<std::size_t>(i)] >= 0) {
            with.push_back(i);
            kv_rows.push_back(v_atd[static_cast<std::size_t>(i)]);
        }
    if (with.empty()) return v_vis;

    std::vector<ValueId> q_rows;
    for (Eigen::Index i : with) q_rows.push_back(t.slice_rows(v_vis, i, 1));
    ValueId q = t.concat_rows(q_rows);
    ValueId kv = t.concat_rows(kv_rows);
    ValueId att = nn::multi_head_attention(t, "inject", q, kv, cfg.n_heads);

    std::vector<ValueId> out_rows;
    out_rows.reserve(static_cast<std::size_t>(n));
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        ValueId vis_row = t.slice_rows(v_vis, i, 1);
        if (k < with.size() && with[k] == i) {
            out_rows.push_back(t.add(vis_row, t.slice_rows(att, static_cast<Eigen::Index>(k), 1)));
            ++k;
        } else {
            out_rows.push_back(vis_row);
        }
    }
    return t.concat_rows(out_rows);
}

// ---------------------------------------------------------------------------
// graph-aware self-attention

/// Self-attention whose logits carry a learned per-head scalar transform of
/// the pairwise meter distances (clipped at dist_clip), with residual and
/// layer normalization around the block. No output projection.
inline ValueId gasa_layer(Tape& t, const PolicyConfig& cfg, int layer, ValueId x,
                          const Mat& dist_matrix) {
    const Eigen::Index n = t.rows(x);
    const Eigen::Index d = t.cols(x);
    require(d == cfg.d_m, "gasa: embedding width ", d, " vs d_m ", cfg.d_m);
    require(dist_matrix.rows() == n && dist_matrix.cols() == n, "gasa: distance matrix is ",
            dist_matrix.rows(), "x", dist_matrix.cols(), " for ", n, " nodes");
    require((dist_matrix - dist_matrix.transpose()).cwiseAbs().maxCoeff() <= 1e-9,
            "gasa: distance matrix not symmetric");
    require(dist_matrix.diagonal().cwiseAbs().maxCoeff() == 0.0,
            "gasa: distance matrix has nonzero diagonal");
    require(dist_matrix.minCoeff() >= 0.0, "gasa: negative distance");

    const std::string p = "gasa.layer" + std::to_string(layer);
    const Eigen::Index dh = d / cfg.n_heads;
    ValueId Q = t.matmul(x, t.param(p + ".Wq"));
    ValueId K = t.matmul(x, t.param(p + ".Wk"));
    ValueId V = t.matmul(x, t.param(p + ".Wv"));
    ValueId E = t.input(dist_matrix.cwiseMin(cfg.dist_clip).matrix());
    ValueId We = t.param(p + ".We");
    std::vector<ValueId> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
        ValueId Qh = t.slice_cols(Q, h * dh, dh);
        ValueId Kh = t.slice_cols(K, h * dh, dh);
        ValueId Vh = t.slice_cols(V, h * dh, dh);
        ValueId scores = t.scale(t.matmul(Qh, t.transpose(Kh)), 1.0 / std::sqrt(double(dh)));
        scores = t.add(scores, t.scalar_mul(t.slice_rows(We, h, 1), E));
        heads.push_back(t.matmul(t.row_softmax(scores), Vh));
    }
    return nn::layer_norm(t, p + ".ln", t.add(x, t.concat_cols(heads)));
}

// ---------------------------------------------------------------------------
// action scoring

struct ActionDistribution {
    std::vector<NodeId> order;         // scored actions; order[0] == kStopAction
    ValueId logits = -1;               // 1 x order.size() tape row
    std::map<NodeId, double> scores;   // logit per scored action
    std::map<NodeId, double> probs;    // softmax; masked-out actions are exact 0
    NodeId argmax = kStopAction;

    void check() const {
        double total = 0.0;
        for (const auto& [id, pr] : probs) total += pr;
        require(std::abs(total - 1.0) < 1e-6, "action distribution: probs sum to ", total);
    }
    std::size_t index_of(NodeId action) const {
        for (std::size_t i = 0; i < order.size(); ++i)
            if (order[i] == action) return i;
        fail("action ", action, " not scored");
    }
};

/// Scores frontier nodes (and, by default, visited non-current nodes) plus
/// STOP. `allowed` (optional) restricts the scored node set; STOP is always
/// kept, and excluded nodes appear in probs with exact probability zero.
inline ActionDistribution predict_action(Tape& t, const PolicyConfig& cfg, const TopoMemory& mem,
                                         const brains::InstructionEmbedding& instr,
                                         const std::set<NodeId>* allowed = nullptr) {
    require(!mem.nodes.empty(), "policy: empty memory");
    mem.check();

    std::vector<NodeId> node_order;
    std::vector<ValueId> vis_rows;
    std::vector<ValueId> atd_slots;
    for (const auto& [id, n] : mem.nodes) {
        node_order.push_back(id);
        require(n.v_vis >= 0, "policy: node ", id, " lacks a visual embedding");
        vis_rows.push_back(n.v_vis);
        atd_slots.push_back(n.v_atd);
    }

    ValueId fusion = inject_latent(t, cfg, t.concat_rows(vis_rows), atd_slots);
    ValueId seq = t.concat_rows({t.param("policy.stop_emb"), fusion});

    // STOP occupies row 0 of the spatial bias with zero distance to every node
    const Eigen::Index n = static_cast<Eigen::Index>(node_order.size());
    Mat E = Mat::Zero(n + 1, n + 1);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            E(i + 1, j + 1) = mem.dist.at(node_order[static_cast<std::size_t>(i)])
                                  .at(node_order[static_cast<std::size_t>(j)]);

    for (int l = 0; l < cfg.l_x; ++l) {
        const std::string r = std::to_string(l);
        ValueId att = nn::multi_head_attention(t, "policy.xattn" + r, seq, instr.tokens,
                                               cfg.n_heads, instr.mask.empty() ? nullptr
                                                                               : &instr.mask);
        seq = nn::layer_norm(t, "policy.xln" + r, t.add(seq, att));
        seq = gasa_layer(t, cfg, l, seq, E);
    }

    ValueId all_scores = nn::linear(t, "policy.head2",
                                    t.relu(nn::linear(t, "policy.head1", seq)));  // (n+1) x 1

    ActionDistribution dist;
    std::vector<ValueId> picked = {t.slice_rows(all_scores, 0, 1)};
    dist.order.push_back(kStopAction);
    for (Eigen::Index i = 0; i < n; ++i) {
        const NodeId id = node_order[static_cast<std::size_t>(i)];
        const NodeStatus st = mem.nodes.at(id).status;
        const bool scorable = st == NodeStatus::frontier ||
                              (st == NodeStatus::visited && cfg.score_visited);
        if (!scorable) continue;
        if (allowed && allowed->count(id) == 0) {
            dist.probs[id] = 0.0;  // masked: exactly zero, never scored
            continue;
        }
        dist.order.push_back(id);
        picked.push_back(t.slice_rows(all_scores, i + 1, 1));
    }
    dist.logits = t.transpose(t.concat_rows(picked));
    ValueId prob_row = t.row_softmax(dist.logits);
    const Mat& lg = t.val(dist.logits);
    const Mat& pr = t.val(prob_row);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < dist.order.size(); ++i) {
        dist.scores[dist.order[i]] = lg(0, static_cast<Eigen::Index>(i));
        dist.probs[dist.order[i]] = pr(0, static_cast<Eigen::Index>(i));
        if (pr(0, static_cast<Eigen::Index>(i)) > best) {
            best = pr(0, static_cast<Eigen::Index>(i));
            dist.argmax = dist.order[i];  // ties keep the earliest entry: STOP, then id order
        }
    }
    dist.check();
    return dist;
}

}  // namespace atd::policy
