#pragma once

// Shared neural building blocks on top of the tape: linear layers, scaled
// dot-product multi-head attention with optional key masking, pre-norm-free
// transformer blocks (attention + FFN with residuals and layer norm), and
// sinusoidal position encodings.
//
// Parameters are two-phase: register_* creates them (deterministic per-name
// init), forward helpers only read them. Forward passes never mutate the
// store.

#include <cmath>
#include <string>
#include <vector>

#include "atd/common.hpp"
#include "atd/params.hpp"
#include "atd/tape.hpp"

namespace atd::nn {

// ---- registration ----

inline void register_linear(ParamStore& s, const std::string& prefix, Eigen::Index in,
                            Eigen::Index out, bool bias = true, Init init = Init::xavier) {
    s.create(prefix + ".W", in, out, init);
    if (bias) s.create(prefix + ".b", 1, out, Init::zeros);
}

inline void register_attention(ParamStore& s, const std::string& prefix, Eigen::Index d) {
    s.create(prefix + ".Wq", d, d, Init::xavier);
    s.create(prefix + ".Wk", d, d, Init::xavier);
    s.create(prefix + ".Wv", d, d, Init::xavier);
    s.create(prefix + ".Wo", d, d, Init::xavier);
}

inline void register_layer_norm(ParamStore& s, const std::string& prefix, Eigen::Index d) {
    s.create(prefix + ".g", 1, d, Init::ones);
    s.create(prefix + ".b", 1, d, Init::zeros);
}

inline void register_block(ParamStore& s, const std::string& prefix, Eigen::Index d,
                           Eigen::Index ffn_hidden) {
    register_attention(s, prefix + ".attn", d);
    register_layer_norm(s, prefix + ".ln1", d);
    register_linear(s, prefix + ".ffn1", d, ffn_hidden);
    register_linear(s, prefix + ".ffn2", ffn_hidden, d);
    register_layer_norm(s, prefix + ".ln2", d);
}

// ---- forward helpers ----

inline ValueId linear(Tape& t, const std::string& prefix, ValueId x, bool bias = true) {
    ValueId y = t.matmul(x, t.param(prefix + ".W"));
    if (bias) y = t.add(y, t.broadcast_row(t.param(prefix + ".b"), t.rows(y)));
    return y;
}

inline ValueId layer_norm(Tape& t, const std::string& prefix, ValueId x) {
    return t.layer_norm(x, t.param(prefix + ".g"), t.param(prefix + ".b"));
}

/// 0 / -1e9 additive bias matrix excluding masked key positions. Masked keys
/// underflow to exactly zero weight after the softmax's max-subtraction.
inline Mat key_mask_bias(Eigen::Index n_q, const std::vector<bool>& key_mask) {
    bool any = false;
    for (bool b : key_mask) any = any || b;
    require(any, "attention: all key positions masked");
    Mat bias = Mat::Zero(n_q, static_cast<Eigen::Index>(key_mask.size()));
    for (std::size_t j = 0; j < key_mask.size(); ++j)
        if (!key_mask[j]) bias.col(static_cast<Eigen::Index>(j)).setConstant(-1e9);
    return bias;
}

/// Scaled dot-product multi-head attention; q: N_q x d, kv: N_kv x d.
/// key_mask (optional) excludes kv rows from every query's context.
inline ValueId multi_head_attention(Tape& t, const std::string& prefix, ValueId q, ValueId kv,
                                    int n_heads, const std::vector<bool>* key_mask = nullptr) {
    const Eigen::Index d = t.cols(q);
    require(t.cols(kv) == d, "attention: query dim ", d, " vs kv dim ", t.cols(kv));
    require(n_heads > 0 && d % n_heads == 0, "attention: dim ", d, " not divisible by ", n_heads);
    if (key_mask)
        require(static_cast<Eigen::Index>(key_mask->size()) == t.rows(kv),
                "attention: mask length mismatch");
    const Eigen::Index dh = d / n_heads;
    ValueId Q = t.matmul(q, t.param(prefix + ".Wq"));
    ValueId K = t.matmul(kv, t.param(prefix + ".Wk"));
    ValueId V = t.matmul(kv, t.param(prefix + ".Wv"));
    ValueId bias = -1;
    if (key_mask) bias = t.input(key_mask_bias(t.rows(q), *key_mask));
    std::vector<ValueId> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        ValueId Qh = t.slice_cols(Q, h * dh, dh);
        ValueId Kh = t.slice_cols(K, h * dh, dh);
        ValueId Vh = t.slice_cols(V, h * dh, dh);
        ValueId scores = t.scale(t.matmul(Qh, t.transpose(Kh)), 1.0 / std::sqrt(double(dh)));
        if (bias >= 0) scores = t.add(scores, bias);
        heads.push_back(t.matmul(t.row_softmax(scores), Vh));
    }
    return t.matmul(t.concat_cols(heads), t.param(prefix + ".Wo"));
}

/// Attention + FFN block with residuals and post-norm. Pass kv = x for
/// self-attention.
inline ValueId transformer_block(Tape& t, const std::string& prefix, ValueId x, ValueId kv,
                                 int n_heads, const std::vector<bool>* key_mask = nullptr) {
    ValueId attn = multi_head_attention(t, prefix + ".attn", x, kv, n_heads, key_mask);
    ValueId x1 = layer_norm(t, prefix + ".ln1", t.add(x, attn));
    ValueId f = linear(t, prefix + ".ffn2", t.relu(linear(t, prefix + ".ffn1", x1)));
    return layer_norm(t, prefix + ".ln2", t.add(x1, f));
}

/// Standard sinusoidal position encoding, one row per position.
inline Mat sinusoidal_pe(Eigen::Index length, Eigen::Index d) {
    Mat pe(length, d);
    for (Eigen::Index pos = 0; pos < length; ++pos) {
        for (Eigen::Index i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -2.0 * double(i / 2) / double(d));
            pe(pos, i) = (i % 2 == 0) ? std::sin(double(pos) * freq) : std::cos(double(pos) * freq);
        }
    }
    return pe;
}

}  // namespace atd::nn
