#pragma once

// Shared test harness: central-difference gradient checking against the
// tape's analytic gradients, for every entry of every parameter in a store.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "atd/params.hpp"
#include "atd/tape.hpp"

namespace atd::testutil {

/// `build` constructs a scalar loss from the store's current values on the
/// given tape. Checks d(loss)/d(param) entry-wise: |fd - analytic| relative
/// to max(1, |fd|, |analytic|) must stay below tol.
inline void check_grads(nn::ParamStore& store,
                        const std::function<nn::ValueId(nn::Tape&)>& build, double h = 1e-6,
                        double tol = 1e-6) {
    nn::Tape t(&store, true);
    nn::ValueId loss = build(t);
    t.backward(loss);
    store.zero_grads();
    t.flush_param_grads();

    auto eval = [&]() {
        nn::Tape f(&store, false);
        return f.val(build(f))(0, 0);
    };

    store.for_each([&](const std::string& name, nn::Param& p) {
        for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
            for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
                const double keep = p.value(i, j);
                p.value(i, j) = keep + h;
                const double up = eval();
                p.value(i, j) = keep - h;
                const double dn = eval();
                p.value(i, j) = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double an = p.grad(i, j);
                const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
                INFO(name << "(" << i << "," << j << "): analytic " << an << " fd " << fd);
                REQUIRE(err < tol);
            }
        }
    });
}

inline Mat fixed_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    Rng rng(seed);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
    return m;
}

}  // namespace atd::testutil
