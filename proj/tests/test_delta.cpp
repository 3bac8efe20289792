// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include "catch_amalgamated.hpp"
#include "kmerge/delta.hpp"
#include "kmerge/error.hpp"
#include "support/oracles.hpp"

using namespace kmerge;

namespace {

const LayerKey kK{0, Projection::key};

} // namespace

TEST_CASE("factored delta densifies to the adapter update", "[delta]") {
    std::mt19937_64 rng(2);
    auto x = oracle::random_adapter(rng, "x", 1, 9, 7, 3, 6.0);
    auto d = DeltaMatrix::from_factors(x.at(kK), x.scaling());
    CHECK(d.rows() == 7);
    CHECK(d.cols() == 9);
    CHECK_FALSE(d.has_dense());
    CHECK(d.factored_rank() == 3);
    CHECK(oracle::relative_diff(d.to_dense(), oracle::delta(x, kK)) < 1e-12);
}

TEST_CASE("dot matches the dense Frobenius product", "[delta]") {
    std::mt19937_64 rng(4);
    auto x = oracle::random_adapter(rng, "x", 1, 12, 10, 2);
    auto y = oracle::random_adapter(rng, "y", 1, 12, 10, 3);
    auto dx = DeltaMatrix::from_factors(x.at(kK), x.scaling());
    auto dy = DeltaMatrix::from_factors(y.at(kK), y.scaling());
    const double want = oracle::frob_dot(oracle::delta(x, kK), oracle::delta(y, kK));
    CHECK(std::abs(dx.dot(dy) - want) <= 1e-9 * std::abs(want));

    // Mixed dense and factored parts.
    auto mixed = DeltaMatrix::from_dense(oracle::delta(y, kK));
    mixed.add_scaled(dx, 0.25);
    const MatrixD dense = oracle::delta(y, kK) + 0.25 * oracle::delta(x, kK);
    const double want_mixed = oracle::frob_dot(dense, oracle::delta(x, kK));
    CHECK(std::abs(mixed.dot(dx) - want_mixed) <= 1e-9 * std::abs(want_mixed));
    CHECK(std::abs(mixed.squared_norm() - oracle::frob_dot(dense, dense)) <= 1e-9 * oracle::frob_dot(dense, dense));
}

TEST_CASE("scale and add_scaled stay exact", "[delta]") {
    std::mt19937_64 rng(6);
    auto x = oracle::random_adapter(rng, "x", 1, 5, 4, 2);
    auto y = oracle::random_adapter(rng, "y", 1, 5, 4, 2);
    auto d = DeltaMatrix::from_factors(x.at(kK), x.scaling());
    d.scale(3.0);
    d.add_scaled(DeltaMatrix::from_factors(y.at(kK), y.scaling()), -0.5);
    MatrixD want = 3.0 * oracle::delta(x, kK) - 0.5 * oracle::delta(y, kK);
    CHECK(oracle::relative_diff(d.to_dense(), want) < 1e-12);
    CHECK(d.terms().size() == 2);
}

TEST_CASE("delta sets cover every layer and check compatibility", "[delta]") {
    std::mt19937_64 rng(8);
    auto x = oracle::random_adapter(rng, "x", 2, 5, 4, 2);
    auto set = to_delta_set(x);
    CHECK(set.size() == 8);
    auto dense = densify(set);
    for (const auto& [k, m] : dense) {
        CHECK(oracle::relative_diff(m, oracle::delta(x, k)) < 1e-12);
    }
    auto other = to_delta_set(oracle::random_adapter(rng, "y", 2, 5, 3, 2));
    try {
        require_compatible(set, other);
        FAIL("expected IncompatibleAdapters");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IncompatibleAdapters);
    }
}
