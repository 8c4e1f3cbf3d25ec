#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "atd/sgca.hpp"
#include "fd_check.hpp"

using namespace atd;
using namespace atd::sgca;
using brains::ImaginationEmbedding;
using brains::StateEmbedding;
using nn::Init;
using nn::ParamStore;
using nn::Tape;
using nn::ValueId;

namespace {

SgcaConfig tiny_config(int n_layers = 2, int d = 3) {
    SgcaConfig cfg;
    cfg.d_m = d;
    cfg.d = d;
    cfg.n_layers = n_layers;
    return cfg;
}

ImaginationEmbedding input_groups(Tape& t, const Mat& stacked, int n, int mk) {
    ImaginationEmbedding im;
    im.groups = t.input(stacked);
    im.n_candidates = n;
    im.group_tokens = mk;
    return im;
}

}  // namespace

TEST_CASE("cosine attention with a single key is all ones") {
    Tape t;
    ValueId qs = t.input(testutil::fixed_matrix(3, 4, 1));
    ValueId ki = t.input(testutil::fixed_matrix(1, 4, 2));
    Mat a = t.val(cosine_attention(t, qs, ki, 0.5));
    REQUIRE(a.rows() == 3);
    REQUIRE(a.cols() == 1);
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(a(i, 0) == 1.0);
}

TEST_CASE("cosine attention saturates for an aligned key at small temperature") {
    Tape t;
    Mat q(1, 3), k(3, 3);
    q << 2.0, 0.0, 0.0;             // parallel to key 0, orthogonal to the rest
    k << 5.0, 0.0, 0.0,             // same direction, different magnitude
        0.0, 1.0, 0.0,
        0.0, 0.0, 7.0;
    Mat a = t.val(cosine_attention(t, t.input(q), t.input(k), 1e-3));
    CHECK(a(0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(a(0, 1) == Catch::Approx(0.0).margin(1e-12));
    CHECK(a(0, 2) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("cosine attention matches the closed-form 2x2 case") {
    // cosines (1, 0) at tau=1: row = softmax(1, 0) = (0.7311, 0.2689)
    Tape t;
    Mat q(1, 2), k(2, 2);
    q << 1.0, 0.0;
    k << 3.0, 0.0, 0.0, 0.5;
    Mat a = t.val(cosine_attention(t, t.input(q), t.input(k), 1.0));
    CHECK(a(0, 0) == Catch::Approx(0.7311).margin(1e-4));
    CHECK(a(0, 1) == Catch::Approx(0.2689).margin(1e-4));
}

TEST_CASE("cosine attention rows are stochastic and scale-invariant") {
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        Tape t;
        Mat qm = testutil::fixed_matrix(4, 6, 100 + trial);
        Mat km = testutil::fixed_matrix(5, 6, 200 + trial);
        Mat a = t.val(cosine_attention(t, t.input(qm), t.input(km), 0.3));
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-6);
            for (Eigen::Index j = 0; j < a.cols(); ++j) {
                CHECK(a(i, j) >= 0.0);
                CHECK(a(i, j) <= 1.0);
            }
        }
        // scaling any key or query row by c > 0 leaves A unchanged
        for (double c : {0.1, 10.0}) {
            Mat km2 = km;
            km2.row(static_cast<Eigen::Index>(trial % 5)) *= c;
            Mat qm2 = qm;
            qm2.row(static_cast<Eigen::Index>(trial % 4)) *= c;
            Tape t2;
            Mat a2 = t2.val(cosine_attention(t2, t2.input(qm2), t2.input(km2), 0.3));
            CHECK((a - a2).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

TEST_CASE("zero-norm rows fall back to cosine zero") {
    Tape t;
    Mat q(2, 3);
    q << 0.0, 0.0, 0.0,   // degenerate query: uniform attention row
        1.0, 0.0, 0.0;
    Mat k(2, 3);
    k << 1.0, 0.0, 0.0, 0.0, 0.0, 0.0;  // second key degenerate: cosine 0
    Mat a = t.val(cosine_attention(t, t.input(q), t.input(k), 1.0));
    CHECK(a(0, 0) == Catch::Approx(0.5));
    CHECK(a(0, 1) == Catch::Approx(0.5));
    // non-degenerate query: softmax(1, 0)
    CHECK(a(1, 0) == Catch::Approx(0.7310585786).margin(1e-9));
    CHECK(a(1, 1) == Catch::Approx(0.2689414214).margin(1e-9));
}

TEST_CASE("an identical imagination group collapses to its projected vector") {
    SgcaConfig cfg = tiny_config(1, 4);
    ParamStore s(40);
    register_sgca(s, cfg);
    Tape t(&s, false);
    Mat group(3, 4);
    Mat row = testutil::fixed_matrix(1, 4, 7);
    group << row, row, row;
    ValueId state = t.input(testutil::fixed_matrix(2, 4, 8));
    auto [refined, a] = sgca_layer(t, cfg, 0, state, t.input(group));
    Mat v = group * s.get("sgca.layer0.Wv").value;
    const Mat& r = t.val(refined);
    for (Eigen::Index i = 0; i < r.rows(); ++i)
        CHECK((r.row(i) - v.row(0)).norm() < 1e-12);
}

TEST_CASE("a saturated attention row selects one value row exactly") {
    SgcaConfig cfg = tiny_config(1, 3);
    cfg.tau = 1e-3;
    ParamStore s(41);
    register_sgca(s, cfg);
    s.get("sgca.layer0.Wq").value = Mat::Identity(3, 3);
    s.get("sgca.layer0.Wk").value = Mat::Identity(3, 3);
    Tape t(&s, false);
    Mat state(1, 3), group(2, 3);
    state << 1.0, 0.0, 0.0;
    group << 1.0, 0.0, 0.0, 0.0, 1.0, 0.0;
    auto [refined, a] = sgca_layer(t, cfg, 0, t.input(state), t.input(group));
    CHECK(t.val(a)(0, 0) == 1.0);
    CHECK(t.val(a)(0, 1) == 0.0);
    Mat v = group * s.get("sgca.layer0.Wv").value;
    CHECK((t.val(refined).row(0) - v.row(0)).norm() == 0.0);  // exact selection
}

TEST_CASE("sgca rejects non-finite inputs") {
    SgcaConfig cfg = tiny_config(1, 3);
    ParamStore s(42);
    register_sgca(s, cfg);
    Tape t(&s, false);
    Mat bad = Mat::Zero(2, 3);
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(sgca_layer(t, cfg, 0, t.input(bad), t.input(Mat::Zero(2, 3))),
                    std::runtime_error);
    CHECK_THROWS_AS(sgca_layer(t, cfg, 0, t.input(Mat::Zero(2, 3)), t.input(bad)),
                    std::runtime_error);
}

TEST_CASE("sgca projection gradients match finite differences") {
    SgcaConfig cfg = tiny_config(1, 3);
    ParamStore s(43);
    register_sgca(s, cfg);
    Mat state = testutil::fixed_matrix(2, 3, 9);
    Mat group = testutil::fixed_matrix(2, 3, 10);
    testutil::check_grads(
        s,
        [&](Tape& t) {
            auto [refined, a] = sgca_layer(t, cfg, 0, t.input(state), t.input(group));
            return t.sum_all(t.hadamard(refined, refined));  // squared norm
        },
        1e-5, 1e-4);
}

TEST_CASE("stack with one layer equals layer plus pooling") {
    SgcaConfig cfg = tiny_config(1, 5);
    ParamStore s(44);
    register_sgca(s, cfg);
    Mat groups = testutil::fixed_matrix(6, 5, 11);  // 2 candidates x 3 tokens
    Mat state = testutil::fixed_matrix(2, 5, 12);

    Tape t(&s, false);
    StateEmbedding st;
    st.tokens = t.input(state);
    auto out = sgca_stack(t, cfg, st, input_groups(t, groups, 2, 3));
    REQUIRE(t.rows(out.v_atd) == 2);
    REQUIRE(t.cols(out.v_atd) == 5);

    Tape t2(&s, false);
    for (int i = 0; i < 2; ++i) {
        auto [refined, a] =
            sgca_layer(t2, cfg, 0, t2.input(state), t2.input(groups.middleRows(i * 3, 3)));
        Mat pooled = t2.val(t2.mean_rows(refined));
        CHECK((t.val(out.v_atd).row(i) - pooled.row(0)).norm() == 0.0);
    }
}

TEST_CASE("stack emits n_layers records per candidate with the right shapes") {
    for (int n_layers : {1, 2, 3, 4}) {
        SgcaConfig cfg = tiny_config(n_layers, 4);
        ParamStore s(45);
        register_sgca(s, cfg);
        Tape t(&s, false);
        StateEmbedding st;
        st.tokens = t.input(testutil::fixed_matrix(3, 4, 13));  // N_q = 3
        const int n = 3, mk = 2;
        auto out = sgca_stack(t, cfg, st, input_groups(t, testutil::fixed_matrix(n * mk, 4, 14), n, mk),
                              {7, 99});
        REQUIRE(out.records.size() == static_cast<std::size_t>(n_layers * n));
        for (const AttentionRecord& rec : out.records) {
            CHECK(rec.step == 7);
            CHECK(rec.episode_id == 99);
            CHECK(rec.matrix.rows() == 3);                              // N_q
            CHECK(rec.matrix.cols() == (rec.layer_index == 0 ? mk : 3));  // keys
            for (Eigen::Index i = 0; i < rec.matrix.rows(); ++i)
                CHECK(std::abs(rec.matrix.row(i).sum() - 1.0) < 1e-6);
        }
        // distinct layers actually use distinct projections
        if (n_layers >= 2)
            CHECK(s.get("sgca.layer0.Wq").value != s.get("sgca.layer1.Wq").value);
    }
}

TEST_CASE("permuting imagination groups permutes grounded vectors identically") {
    SgcaConfig cfg = tiny_config(3, 4);
    ParamStore s(46);
    register_sgca(s, cfg);
    const int n = 4, mk = 2;
    Mat groups = testutil::fixed_matrix(n * mk, 4, 15);
    Mat perm(n * mk, 4);  // candidate order 2,0,3,1
    const int order[4] = {2, 0, 3, 1};
    for (int i = 0; i < n; ++i) perm.middleRows(i * mk, mk) = groups.middleRows(order[i] * mk, mk);
    Mat state = testutil::fixed_matrix(2, 4, 16);

    Tape t1(&s, false), t2(&s, false);
    StateEmbedding st1, st2;
    st1.tokens = t1.input(state);
    st2.tokens = t2.input(state);
    Mat v1 = t1.val(sgca_stack(t1, cfg, st1, input_groups(t1, groups, n, mk)).v_atd);
    Mat v2 = t2.val(sgca_stack(t2, cfg, st2, input_groups(t2, perm, n, mk)).v_atd);
    for (int i = 0; i < n; ++i) CHECK((v2.row(i) - v1.row(order[i])).norm() == 0.0);
}

TEST_CASE("attention dumps round-trip through the file pair") {
    SgcaConfig cfg = tiny_config(2, 4);
    ParamStore s(47);
    register_sgca(s, cfg);
    Tape t(&s, false);
    StateEmbedding st;
    st.tokens = t.input(testutil::fixed_matrix(2, 4, 17));
    auto out =
        sgca_stack(t, cfg, st, input_groups(t, testutil::fixed_matrix(6, 4, 18), 3, 2), {0, 5});

    const std::string base = std::filesystem::temp_directory_path() / "atd_attn_test";
    write_attention_dump(base, 5, cfg.n_layers, out.records);
    auto [header, back] = read_attention_dump(base);
    CHECK(header.at("episode_id").get<std::uint64_t>() == 5);
    CHECK(header.at("n_layers").get<int>() == 2);
    CHECK(header.at("count").get<std::size_t>() == out.records.size());
    REQUIRE(back.size() == out.records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].layer_index == out.records[i].layer_index);
        CHECK(back[i].candidate == out.records[i].candidate);
        CHECK(back[i].step == out.records[i].step);
        REQUIRE(back[i].matrix.rows() == out.records[i].matrix.rows());
        // float32 payload: compare at single precision
        CHECK((back[i].matrix - out.records[i].matrix).cwiseAbs().maxCoeff() < 1e-6);
        for (Eigen::Index r = 0; r < back[i].matrix.rows(); ++r)
            CHECK(std::abs(back[i].matrix.row(r).sum() - 1.0) < 1e-5);
    }
    std::filesystem::remove(base + ".json");
    std::filesystem::remove(base + ".bin");
}

TEST_CASE("sgca config validation") {
    SgcaConfig cfg;
    cfg.n_layers = 5;
    CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
    cfg.n_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
    cfg = SgcaConfig{};
    CHECK(cfg.temperature() == Catch::Approx(1.0 / std::sqrt(128.0)));
    cfg.tau = 1.0;  // literal-equation mode
    CHECK(cfg.temperature() == 1.0);
}
