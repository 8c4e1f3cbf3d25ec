#pragma once

// The two surrogate "brains": a state-estimation encoder producing a fixed
// set of state tokens from instruction + observations + visited summary, and
// an imagination encoder producing one direction-conditioned token group per
// candidate viewpoint. Each carries an auxiliary prediction head that
// supplies its warm-up training signal (current hop index / candidate
// landmark).

#include <string>
#include <utility>
#include <vector>

#include "atd/common.hpp"
#include "atd/graphworld.hpp"
#include "atd/layers.hpp"
#include "atd/params.hpp"
#include "atd/tape.hpp"

namespace atd::brains {

using nn::ParamStore;
using nn::Tape;
using nn::ValueId;

struct BrainConfig {
    int d_m = 128;           // shared model width
    int n_heads = 4;
    int n_blocks = 2;        // cross-attention blocks per brain
    int state_tokens = 4;    // m: state token count
    int group_tokens = 4;    // M_kv: imagination tokens per candidate
    int progress_classes = 16;
    int landmark_vocab = 6;
    int view_dim = 16;
    int ffn_mult = 2;

    int token_vocab() const { return landmark_vocab + 4; }  // + direction/stop tokens
    Eigen::Index ffn_hidden() const { return static_cast<Eigen::Index>(ffn_mult) * d_m; }

    void validate() const {
        require(d_m > 0 && n_heads > 0 && d_m % n_heads == 0, "d_m ", d_m,
                " must be a positive multiple of n_heads ", n_heads);
        require(n_blocks >= 1 && n_blocks <= 8, "n_blocks must be in [1,8]");
        require(state_tokens >= 1 && group_tokens >= 1, "query token counts must be >= 1");
        require(progress_classes >= 2, "progress_classes must be >= 2");
        require(landmark_vocab >= 2 && view_dim >= 1, "bad vocab/view dims");
        require(ffn_mult >= 1, "ffn_mult must be >= 1");
    }
};

/// Encoded instruction: tokens on the tape plus a padding mask. Positions
/// with mask=false never contribute to any attention output downstream.
struct InstructionEmbedding {
    ValueId tokens = -1;  // L x d_m
    std::vector<bool> mask;

    int length() const { return static_cast<int>(mask.size()); }
};

struct StateEmbedding {
    ValueId tokens = -1;               // m x d_m
    ValueId aux_progress_logits = -1;  // 1 x progress_classes
};

struct ImaginationEmbedding {
    ValueId groups = -1;               // (N * M_kv) x d_m, candidate-major
    ValueId aux_landmark_logits = -1;  // N x landmark_vocab
    int n_candidates = 0;
    int group_tokens = 0;
};

// ---------------------------------------------------------------------------
// parameter registration

inline void register_instruction_encoder(ParamStore& s, const BrainConfig& cfg) {
    cfg.validate();
    s.create("instr.embed", cfg.token_vocab(), cfg.d_m, nn::Init::gaussian_scaled);
    nn::register_block(s, "instr.block0", cfg.d_m, cfg.ffn_hidden());
}

inline void register_left_brain(ParamStore& s, const BrainConfig& cfg) {
    cfg.validate();
    s.create("left.queries", cfg.state_tokens, cfg.d_m, nn::Init::gaussian_scaled);
    nn::register_linear(s, "left.obs_proj", cfg.view_dim, cfg.d_m, false);
    for (int b = 0; b < cfg.n_blocks; ++b)
        nn::register_block(s, "left.block" + std::to_string(b), cfg.d_m, cfg.ffn_hidden());
    nn::register_linear(s, "left.aux", cfg.d_m, cfg.progress_classes);
}

inline void register_right_brain(ParamStore& s, const BrainConfig& cfg) {
    cfg.validate();
    s.create("right.queries", cfg.group_tokens, cfg.d_m, nn::Init::gaussian_scaled);
    nn::register_linear(s, "right.dir_proj", 2, cfg.d_m, false);
    nn::register_linear(s, "right.obs_proj", cfg.view_dim, cfg.d_m, false);
    for (int b = 0; b < cfg.n_blocks; ++b)
        nn::register_block(s, "right.block" + std::to_string(b), cfg.d_m, cfg.ffn_hidden());
    nn::register_linear(s, "right.aux", cfg.d_m, cfg.landmark_vocab);
}

// ---------------------------------------------------------------------------
// observation packing

inline Mat observation_features(const std::vector<world::Observation>& obs) {
    require(!obs.empty(), "observation_features: no candidates");
    const auto d = static_cast<Eigen::Index>(obs[0].view.size());
    Mat m(static_cast<Eigen::Index>(obs.size()), d);
    for (std::size_t i = 0; i < obs.size(); ++i) {
        require(static_cast<Eigen::Index>(obs[i].view.size()) == d,
                "observation_features: ragged view features");
        for (Eigen::Index j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = obs[i].view[j];
    }
    return m;
}

/// (cos, sin) of each candidate's relative direction, one row per candidate.
inline Mat observation_directions(const std::vector<world::Observation>& obs) {
    Mat m(static_cast<Eigen::Index>(obs.size()), 2);
    for (std::size_t i = 0; i < obs.size(); ++i) {
        m(static_cast<Eigen::Index>(i), 0) = std::cos(obs[i].direction);
        m(static_cast<Eigen::Index>(i), 1) = std::sin(obs[i].direction);
    }
    return m;
}

// ---------------------------------------------------------------------------
// forward passes

/// Embedding lookup + sinusoidal position encoding + one self-attention
/// block. `pad_mask` (optional) marks positions to exclude; they are carried
/// through to the output mask and never used as attention keys.
inline InstructionEmbedding encode_instruction(Tape& t, const BrainConfig& cfg,
                                               const std::vector<int>& token_ids,
                                               const std::vector<bool>* pad_mask = nullptr) {
    require(!token_ids.empty(), "encode_instruction: empty instruction");
    const int vocab = cfg.token_vocab();
    for (int tok : token_ids)
        require(tok >= 0 && tok < vocab, "encode_instruction: token ", tok,
                " outside vocabulary [0,", vocab, ")");
    if (pad_mask)
        require(pad_mask->size() == token_ids.size(), "encode_instruction: mask length ",
                pad_mask->size(), " vs ", token_ids.size(), " tokens");

    const auto L = static_cast<Eigen::Index>(token_ids.size());
    ValueId table = t.param("instr.embed");
    std::vector<ValueId> rows;
    rows.reserve(token_ids.size());
    for (int tok : token_ids) rows.push_back(t.slice_rows(table, tok, 1));
    ValueId x = rows.size() == 1 ? rows[0] : t.concat_rows(rows);
    x = t.add(x, t.input(nn::sinusoidal_pe(L, cfg.d_m)));

    InstructionEmbedding out;
    out.mask = pad_mask ? *pad_mask : std::vector<bool>(token_ids.size(), true);
    out.tokens = nn::transformer_block(t, "instr.block0", x, x, cfg.n_heads, &out.mask);
    return out;
}

/// State tokens: m learnable queries cross-attending to
/// [instruction | projected observations | visited summary].
/// visited_summary must be a 1 x d_m row on the same tape.
inline StateEmbedding left_brain_forward(Tape& t, const BrainConfig& cfg,
                                         const InstructionEmbedding& instr,
                                         const std::vector<world::Observation>& obs,
                                         ValueId visited_summary) {
    require(!obs.empty(), "left_brain_forward: no candidates");
    require(t.cols(instr.tokens) == cfg.d_m, "left_brain_forward: instruction dim ",
            t.cols(instr.tokens), " vs d_m ", cfg.d_m);
    require(t.rows(visited_summary) == 1 && t.cols(visited_summary) == cfg.d_m,
            "left_brain_forward: visited summary must be 1 x d_m");
    Mat feats = observation_features(obs);
    require(feats.cols() == cfg.view_dim, "left_brain_forward: view dim ", feats.cols(), " vs ",
            cfg.view_dim);

    ValueId of = nn::linear(t, "left.obs_proj", t.input(feats), false);
    ValueId kv = t.concat_rows({instr.tokens, of, visited_summary});
    std::vector<bool> mask = instr.mask;
    mask.insert(mask.end(), obs.size() + 1, true);

    ValueId q = t.param("left.queries");
    for (int b = 0; b < cfg.n_blocks; ++b)
        q = nn::transformer_block(t, "left.block" + std::to_string(b), q, kv, cfg.n_heads, &mask);

    StateEmbedding out;
    out.tokens = q;
    out.aux_progress_logits = nn::linear(t, "left.aux", t.mean_rows(q));
    return out;
}

/// Imagination groups: per candidate, M_kv learnable queries shifted by a
/// projection of that candidate's direction, cross-attending to
/// [instruction | all projected observations]. Groups are stacked
/// candidate-major; rows [i*M_kv, (i+1)*M_kv) belong to candidate i.
inline ImaginationEmbedding right_brain_forward(Tape& t, const BrainConfig& cfg,
                                                const InstructionEmbedding& instr,
                                                const std::vector<world::Observation>& obs) {
    require(!obs.empty(), "right_brain_forward: no candidates");
    require(t.cols(instr.tokens) == cfg.d_m, "right_brain_forward: instruction dim ",
            t.cols(instr.tokens), " vs d_m ", cfg.d_m);
    Mat feats = observation_features(obs);
    require(feats.cols() == cfg.view_dim, "right_brain_forward: view dim ", feats.cols(), " vs ",
            cfg.view_dim);
    const int n = static_cast<int>(obs.size());
    const int mk = cfg.group_tokens;

    ValueId of = nn::linear(t, "right.obs_proj", t.input(feats), false);
    ValueId kv = t.concat_rows({instr.tokens, of});
    std::vector<bool> mask = instr.mask;
    mask.insert(mask.end(), obs.size(), true);

    // direction-conditioned queries, all candidates stacked on one tape pass
    ValueId dirs = nn::linear(t, "right.dir_proj", t.input(observation_directions(obs)), false);
    ValueId base = t.param("right.queries");
    std::vector<ValueId> groups;
    groups.reserve(n);
    for (int i = 0; i < n; ++i)
        groups.push_back(t.add(base, t.broadcast_row(t.slice_rows(dirs, i, 1), mk)));
    ValueId g = n == 1 ? groups[0] : t.concat_rows(groups);

    for (int b = 0; b < cfg.n_blocks; ++b)
        g = nn::transformer_block(t, "right.block" + std::to_string(b), g, kv, cfg.n_heads, &mask);

    // per-candidate pooled tokens feed the landmark head
    std::vector<ValueId> pooled;
    pooled.reserve(n);
    for (int i = 0; i < n; ++i) pooled.push_back(t.mean_rows(t.slice_rows(g, i * mk, mk)));
    ValueId pooled_all = n == 1 ? pooled[0] : t.concat_rows(pooled);

    ImaginationEmbedding out;
    out.groups = g;
    out.aux_landmark_logits = nn::linear(t, "right.aux", pooled_all);
    out.n_candidates = n;
    out.group_tokens = mk;
    return out;
}

// ---------------------------------------------------------------------------
// auxiliary losses

struct BrainTargets {
    int hop_index = 0;                     // left-brain label
    std::vector<int> candidate_landmarks;  // right-brain labels, one per candidate
};

/// (left, right) cross-entropy losses; right is the mean over candidates.
inline std::pair<ValueId, ValueId> brain_losses(Tape& t, const StateEmbedding& state,
                                                const ImaginationEmbedding& imag,
                                                const BrainTargets& targets) {
    ValueId left = t.ce_with_logits(state.aux_progress_logits, targets.hop_index);
    require(static_cast<int>(targets.candidate_landmarks.size()) == imag.n_candidates,
            "brain_losses: ", targets.candidate_landmarks.size(), " landmark targets for ",
            imag.n_candidates, " candidates");
    ValueId right = -1;
    for (int i = 0; i < imag.n_candidates; ++i) {
        ValueId ce = t.ce_with_logits(t.slice_rows(imag.aux_landmark_logits, i, 1),
                                      targets.candidate_landmarks[i]);
        right = right < 0 ? ce : t.add(right, ce);
    }
    right = t.scale(right, 1.0 / static_cast<double>(imag.n_candidates));
    return {left, right};
}

}  // namespace atd::brains
