#pragma once

// State-grounded cross-attention: state tokens query each candidate's
// imagination group with cosine-similarity attention. Layers stack with the
// state tokens as a persistent query stream while the refined output becomes
// the next layer's key/value stream. The final refined tokens are mean-pooled
// into one grounded vector per candidate. Every attention matrix is exported
// as an AttentionRecord.

#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "atd/brains.hpp"
#include "atd/common.hpp"
#include "atd/layers.hpp"
#include "atd/tape.hpp"

namespace atd::sgca {

using nn::ParamStore;
using nn::Tape;
using nn::ValueId;

struct SgcaConfig {
    int d_m = 128;      // incoming token width
    int d = 128;        // projected attention width
    int n_layers = 4;
    double tau = 0.0;   // softmax temperature; 0 selects the 1/sqrt(d) default

    double temperature() const { return tau > 0.0 ? tau : 1.0 / std::sqrt(double(d)); }

    void validate() const {
        require(d_m > 0 && d > 0, "sgca dims must be positive");
        require(n_layers >= 1 && n_layers <= 4, "sgca n_layers must be in [1,4], got ", n_layers);
        require(tau >= 0.0, "sgca tau must be >= 0 (0 = default)");
    }
};

/// One attention matrix snapshot: queries x keys, rows sum to 1.
struct AttentionRecord {
    int layer_index = 0;
    int candidate = 0;
    int step = 0;
    std::uint64_t episode_id = 0;
    Mat matrix;
};

inline void register_sgca(ParamStore& s, const SgcaConfig& cfg) {
    cfg.validate();
    for (int l = 0; l < cfg.n_layers; ++l) {
        const Eigen::Index kv_in = l == 0 ? cfg.d_m : cfg.d;
        const std::string p = "sgca.layer" + std::to_string(l);
        s.create(p + ".Wq", cfg.d_m, cfg.d, nn::Init::xavier);
        s.create(p + ".Wk", kv_in, cfg.d, nn::Init::xavier);
        s.create(p + ".Wv", kv_in, cfg.d, nn::Init::xavier);
    }
}

/// A[p, q] = softmax over q of cos(Qs[p], Ki[q]) / tau. Zero-norm rows score
/// cosine 0 against everything (warned once per process).
inline ValueId cosine_attention(Tape& t, ValueId qs, ValueId ki, double tau) {
    require(tau > 0.0, "cosine_attention: tau must be > 0");
    require(t.cols(qs) == t.cols(ki), "cosine_attention: dim mismatch ", t.cols(qs), " vs ",
            t.cols(ki));
    ValueId qn = t.l2_normalize_rows(qs);
    ValueId kn = t.l2_normalize_rows(ki);
    return t.row_softmax(t.scale(t.matmul(qn, t.transpose(kn)), 1.0 / tau));
}

/// One grounding layer against one key/value stream: refined = A (kv Wv).
inline std::pair<ValueId, ValueId> sgca_layer(Tape& t, const SgcaConfig& cfg, int layer,
                                              ValueId state_tokens, ValueId kv) {
    require(layer >= 0 && layer < cfg.n_layers, "sgca_layer: layer ", layer, " out of range");
    require(t.val(state_tokens).allFinite(), "sgca_layer: non-finite state tokens");
    require(t.val(kv).allFinite(), "sgca_layer: non-finite key/value stream");
    const std::string p = "sgca.layer" + std::to_string(layer);
    ValueId qs = t.matmul(state_tokens, t.param(p + ".Wq"));
    ValueId k = t.matmul(kv, t.param(p + ".Wk"));
    ValueId v = t.matmul(kv, t.param(p + ".Wv"));
    ValueId a = cosine_attention(t, qs, k, cfg.temperature());
    return {t.matmul(a, v), a};
}

struct RecordMeta {
    int step = 0;
    std::uint64_t episode_id = 0;
};

struct SgcaOutput {
    ValueId v_atd = -1;  // N x d, one grounded vector per candidate
    std::vector<AttentionRecord> records;
};

/// Full stack over every candidate group. Emits n_layers records per
/// candidate; the first layer attends over the M_kv imagination tokens, later
/// layers over the N_q refined tokens.
inline SgcaOutput sgca_stack(Tape& t, const SgcaConfig& cfg,
                             const brains::StateEmbedding& state,
                             const brains::ImaginationEmbedding& imag,
                             const RecordMeta& meta = {}) {
    cfg.validate();
    require(imag.n_candidates >= 1, "sgca_stack: no imagination groups");
    require(t.cols(state.tokens) == cfg.d_m, "sgca_stack: state width ", t.cols(state.tokens),
            " vs d_m ", cfg.d_m);
    require(t.cols(imag.groups) == cfg.d_m, "sgca_stack: imagination width ",
            t.cols(imag.groups), " vs d_m ", cfg.d_m);

    SgcaOutput out;
    std::vector<ValueId> pooled;
    pooled.reserve(imag.n_candidates);
    for (int i = 0; i < imag.n_candidates; ++i) {
        ValueId kv = t.slice_rows(imag.groups, i * imag.group_tokens, imag.group_tokens);
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto [refined, a] = sgca_layer(t, cfg, l, state.tokens, kv);
            AttentionRecord rec;
            rec.layer_index = l;
            rec.candidate = i;
            rec.step = meta.step;
            rec.episode_id = meta.episode_id;
            rec.matrix = t.val(a);
            out.records.push_back(std::move(rec));
            kv = refined;
        }
        pooled.push_back(t.mean_rows(kv));
    }
    out.v_atd = pooled.size() == 1 ? pooled[0] : t.concat_rows(pooled);
    return out;
}

// ---------------------------------------------------------------------------
// attention dump files: <base>.json header + <base>.bin float32 payload

inline void write_attention_dump(const std::string& base_path, std::uint64_t episode_id,
                                 int n_layers, const std::vector<AttentionRecord>& records) {
    nlohmann::json index = nlohmann::json::array();
    std::ofstream bin(base_path + ".bin", std::ios::binary);
    if (!bin) throw IoError("cannot open for write: " + base_path + ".bin");
    std::size_t offset = 0;
    int max_step = -1;
    for (std::size_t r = 0; r < records.size(); ++r) {
        const AttentionRecord& rec = records[r];
        const auto rows = rec.matrix.rows(), cols = rec.matrix.cols();
        index.push_back({{"index", r},
                         {"layer", rec.layer_index},
                         {"step", rec.step},
                         {"candidate", rec.candidate},
                         {"rows", rows},
                         {"cols", cols},
                         {"offset", offset}});
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) {
                const float f = static_cast<float>(rec.matrix(i, j));
                bin.write(reinterpret_cast<const char*>(&f), sizeof(float));
            }
        offset += static_cast<std::size_t>(rows * cols) * sizeof(float);
        max_step = std::max(max_step, rec.step);
    }
    if (!bin) throw IoError("write failed: " + base_path + ".bin");
    bin.close();
    nlohmann::json header{{"episode_id", episode_id},
                          {"n_layers", n_layers},
                          {"steps", max_step + 1},
                          {"count", records.size()},
                          {"records", index}};
    std::ofstream js(base_path + ".json");
    if (!js) throw IoError("cannot open for write: " + base_path + ".json");
    js << header.dump(2) << "\n";
    if (!js) throw IoError("write failed: " + base_path + ".json");
}

inline std::pair<nlohmann::json, std::vector<AttentionRecord>> read_attention_dump(
    const std::string& base_path) {
    std::ifstream js(base_path + ".json");
    if (!js) throw IoError("cannot open: " + base_path + ".json");
    nlohmann::json header;
    try {
        js >> header;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad attention header " + base_path + ".json: " + e.what());
    }
    std::ifstream bin(base_path + ".bin", std::ios::binary);
    if (!bin) throw IoError("cannot open: " + base_path + ".bin");
    std::vector<AttentionRecord> records;
    try {
        for (const auto& e : header.at("records")) {
            AttentionRecord rec;
            rec.layer_index = e.at("layer").get<int>();
            rec.step = e.at("step").get<int>();
            rec.candidate = e.at("candidate").get<int>();
            rec.episode_id = header.at("episode_id").get<std::uint64_t>();
            const auto rows = e.at("rows").get<Eigen::Index>();
            const auto cols = e.at("cols").get<Eigen::Index>();
            bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::size_t>()));
            rec.matrix.resize(rows, cols);
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index j = 0; j < cols; ++j) {
                    float f = 0.0f;
                    bin.read(reinterpret_cast<char*>(&f), sizeof(float));
                    rec.matrix(i, j) = static_cast<double>(f);
                }
            if (!bin) throw IoError("attention payload truncated: " + base_path + ".bin");
            records.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad attention header " + base_path + ".json: " + e.what());
    }
    return {header, records};
}

}  // namespace atd::sgca
