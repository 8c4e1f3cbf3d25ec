#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "atd/params.hpp"
#include "atd/tape.hpp"
#include "fd_check.hpp"

using namespace atd;
using nn::Init;
using nn::Param;
using nn::ParamStore;
using nn::Tape;
using nn::ValueId;
using testutil::check_grads;
using testutil::fixed_matrix;

TEST_CASE("forward values for basic ops") {
    Tape t;
    Mat a(2, 2), b(2, 2);
    a << 1, 2, 3, 4;
    b << 5, 6, 7, 8;
    ValueId ia = t.input(a), ib = t.input(b);
    CHECK(t.val(t.add(ia, ib))(1, 1) == 12.0);
    CHECK(t.val(t.sub(ia, ib))(0, 0) == -4.0);
    CHECK(t.val(t.scale(ia, 3.0))(0, 1) == 6.0);
    CHECK(t.val(t.matmul(ia, ib))(0, 0) == 19.0);  // 1*5+2*7
    CHECK(t.val(t.hadamard(ia, ib))(1, 0) == 21.0);
    CHECK(t.val(t.transpose(ia))(0, 1) == 3.0);
    CHECK(t.val(t.sum_all(ia))(0, 0) == 10.0);
    CHECK(t.val(t.mean_rows(ia))(0, 0) == 2.0);
    CHECK(t.val(t.mean_rows(ia))(0, 1) == 3.0);
    Mat row(1, 2);
    row << 4, 9;
    ValueId ir = t.input(row);
    ValueId br = t.broadcast_row(ir, 3);
    CHECK(t.rows(br) == 3);
    CHECK(t.val(br)(2, 1) == 9.0);
}

TEST_CASE("softmax of a two-logit row matches the closed form") {
    // softmax(1, 0) = (e / (e+1), 1 / (e+1))
    Tape t;
    Mat z(1, 2);
    z << 1.0, 0.0;
    Mat y = t.val(t.row_softmax(t.input(z)));
    CHECK(y(0, 0) == Catch::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(y(0, 1) == Catch::Approx(0.2689414213699951).epsilon(1e-12));
    CHECK(y.row(0).sum() == Catch::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("cross entropy matches an independently computed constant") {
    // logits (0.2, -0.1, 0.4), target 2: loss = ln(e^.2 + e^-.1 + e^.4) - 0.4
    Tape t;
    Mat z(1, 3);
    z << 0.2, -0.1, 0.4;
    const double got = t.val(t.ce_with_logits(t.input(z), 2))(0, 0);
    const double direct =
        std::log(std::exp(0.2) + std::exp(-0.1) + std::exp(0.4)) - 0.4;
    CHECK(got == Catch::Approx(direct).epsilon(1e-14));
    CHECK(got == Catch::Approx(0.8859393).margin(5e-7));
}

TEST_CASE("l2 row normalisation zeroes degenerate rows") {
    Tape t(nullptr, true);
    Mat x(2, 3);
    x << 3.0, 0.0, 4.0, 0.0, 0.0, 0.0;
    ValueId nx = t.l2_normalize_rows(t.input(x));
    CHECK(t.val(nx)(0, 0) == Catch::Approx(0.6));
    CHECK(t.val(nx)(0, 2) == Catch::Approx(0.8));
    CHECK(t.val(nx).row(1).norm() == 0.0);
}

TEST_CASE("gradients match central differences on every op") {
    SECTION("linear chain: add, sub, scale, matmul, transpose") {
        ParamStore s(11);
        s.create("A", 3, 2, Init::xavier);
        s.create("B", 2, 4, Init::xavier);
        s.create("C", 3, 4, Init::gaussian_scaled);
        Mat w = fixed_matrix(3, 4, 5);
        check_grads(s, [&](Tape& t) {
            ValueId prod = t.matmul(t.param("A"), t.param("B"));
            ValueId mix = t.sub(t.add(prod, t.param("C")), t.scale(t.param("C"), 0.25));
            ValueId weighted = t.hadamard(mix, t.input(w));
            return t.sum_all(t.transpose(weighted));
        });
    }

    SECTION("scalar_mul") {
        ParamStore s(12);
        s.create("s", 1, 1, Init::ones);
        s.create("M", 2, 3, Init::xavier);
        Mat w = fixed_matrix(2, 3, 6);
        check_grads(s, [&](Tape& t) {
            return t.sum_all(t.hadamard(t.scalar_mul(t.param("s"), t.param("M")), t.input(w)));
        });
    }

    SECTION("concat and slice round trips") {
        ParamStore s(13);
        s.create("P", 2, 3, Init::xavier);
        s.create("Q", 1, 3, Init::xavier);
        s.create("R", 3, 2, Init::xavier);
        Mat w1 = fixed_matrix(3, 3, 7), w2 = fixed_matrix(3, 5, 8);
        check_grads(s, [&](Tape& t) {
            ValueId stacked = t.concat_rows({t.param("P"), t.param("Q")});
            ValueId wide = t.concat_cols({stacked, t.param("R")});
            ValueId part = t.slice_cols(t.slice_rows(wide, 0, 3), 1, 3);
            ValueId both = t.add(t.hadamard(stacked, t.input(w1)), part);
            return t.add(t.sum_all(both), t.sum_all(t.hadamard(wide, t.input(w2))));
        });
    }

    SECTION("broadcast_row and mean_rows") {
        ParamStore s(14);
        s.create("r", 1, 4, Init::xavier);
        s.create("M", 3, 4, Init::xavier);
        Mat w = fixed_matrix(1, 4, 9);
        check_grads(s, [&](Tape& t) {
            ValueId spread = t.broadcast_row(t.param("r"), 3);
            ValueId mixed = t.hadamard(spread, t.param("M"));
            return t.sum_all(t.hadamard(t.mean_rows(mixed), t.input(w)));
        });
    }

    SECTION("relu away from the kink") {
        ParamStore s(15);
        auto& p = s.create("X", 3, 3, Init::xavier);
        // push entries away from zero so the finite difference never crosses it
        for (Eigen::Index i = 0; i < 3; ++i)
            for (Eigen::Index j = 0; j < 3; ++j)
                p.value(i, j) += (p.value(i, j) >= 0.0 ? 0.5 : -0.5);
        Mat w = fixed_matrix(3, 3, 10);
        check_grads(s, [&](Tape& t) {
            return t.sum_all(t.hadamard(t.relu(t.param("X")), t.input(w)));
        });
    }

    SECTION("row softmax") {
        ParamStore s(16);
        s.create("Z", 2, 5, Init::xavier);
        Mat w = fixed_matrix(2, 5, 11);
        check_grads(s, [&](Tape& t) {
            return t.sum_all(t.hadamard(t.row_softmax(t.param("Z")), t.input(w)));
        });
    }

    SECTION("l2 normalisation") {
        ParamStore s(17);
        auto& p = s.create("X", 3, 4, Init::xavier);
        p.value.array() += 0.3;  // keep rows clearly non-degenerate
        Mat w = fixed_matrix(3, 4, 12);
        check_grads(s, [&](Tape& t) {
            return t.sum_all(t.hadamard(t.l2_normalize_rows(t.param("X")), t.input(w)));
        });
    }

    SECTION("layer norm with learned gain and bias") {
        ParamStore s(18);
        s.create("X", 3, 6, Init::xavier);
        s.create("g", 1, 6, Init::ones);
        s.create("b", 1, 6, Init::zeros);
        Mat w = fixed_matrix(3, 6, 13);
        check_grads(s, [&](Tape& t) {
            ValueId y = t.layer_norm(t.param("X"), t.param("g"), t.param("b"));
            return t.sum_all(t.hadamard(y, t.input(w)));
        }, 1e-6, 2e-6);
    }

    SECTION("cross entropy with logits") {
        ParamStore s(19);
        s.create("z", 1, 6, Init::xavier);
        check_grads(s, [&](Tape& t) { return t.ce_with_logits(t.param("z"), 3); });
    }

    SECTION("parameter used twice accumulates both paths") {
        ParamStore s(20);
        s.create("W", 2, 2, Init::xavier);
        Mat w = fixed_matrix(2, 2, 14);
        check_grads(s, [&](Tape& t) {
            ValueId w1 = t.param("W");
            ValueId w2 = t.param("W");
            return t.sum_all(t.hadamard(t.matmul(w1, w2), t.input(w)));
        });
    }
}

TEST_CASE("gradient seed scales the whole backward pass") {
    ParamStore s(21);
    s.create("X", 2, 2, Init::xavier);
    auto run = [&](double seed) {
        Tape t(&s, true);
        ValueId loss = t.sum_all(t.hadamard(t.param("X"), t.param("X")));
        t.backward(loss, seed);
        return t.param_grad("X");
    };
    Mat g1 = run(1.0), g2 = run(0.5);
    CHECK((g1 * 0.5 - g2).norm() < 1e-15);
}

TEST_CASE("frozen parameters receive no flushed gradient") {
    ParamStore s(22);
    s.create("enc.W", 2, 2, Init::xavier);
    s.create("head.W", 2, 2, Init::xavier);
    s.set_trainable("enc.", false);
    Tape t(&s, true);
    ValueId loss = t.sum_all(t.matmul(t.param("enc.W"), t.param("head.W")));
    t.backward(loss);
    s.zero_grads();
    t.flush_param_grads();
    CHECK(s.get("enc.W").grad.norm() == 0.0);
    CHECK(s.get("head.W").grad.norm() > 0.0);
    // the tape still saw a gradient for the frozen leaf
    CHECK(t.param_grad("enc.W").norm() > 0.0);
}

TEST_CASE("no-grad tape rejects backward") {
    ParamStore s(23);
    s.create("X", 1, 1, Init::ones);
    Tape t(&s, false);
    ValueId loss = t.sum_all(t.param("X"));
    CHECK_THROWS_AS(t.backward(loss), std::runtime_error);
}

TEST_CASE("shape errors are reported") {
    Tape t;
    ValueId a = t.input(Mat::Zero(2, 3));
    ValueId b = t.input(Mat::Zero(3, 2));
    CHECK_THROWS_AS(t.add(a, b), std::runtime_error);
    CHECK_THROWS_AS(t.hadamard(a, b), std::runtime_error);
    CHECK_THROWS_AS(t.matmul(a, a), std::runtime_error);
    CHECK_THROWS_AS(t.slice_rows(a, 1, 5), std::runtime_error);
    CHECK_THROWS_AS(t.ce_with_logits(a, 0), std::runtime_error);  // not 1xK
    ValueId z = t.input(Mat::Zero(1, 3));
    CHECK_THROWS_AS(t.ce_with_logits(z, 3), std::runtime_error);  // target out of range
}

TEST_CASE("linear debug mode reduces nonlinearities to affine maps") {
    ParamStore s(24);
    s.create("X", 2, 4, Init::xavier);
    s.create("g", 1, 4, Init::ones);
    s.create("b", 1, 4, Init::zeros);
    Tape t(&s, true);
    t.linear_debug = true;
    ValueId x = t.param("X");
    CHECK(t.relu(x) == x);  // identity: same node
    Mat sm = t.val(t.row_softmax(x));
    CHECK(sm(0, 0) == Catch::Approx(0.25));
    CHECK(sm(1, 3) == Catch::Approx(0.25));
    Mat ln = t.val(t.layer_norm(x, t.param("g"), t.param("b")));
    CHECK((ln - t.val(x)).norm() < 1e-15);  // gamma=1, beta=0
}
