// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <atomic>
#include <random>
#include <set>
#include <thread>

#include "catch_amalgamated.hpp"
#include "kmerge/error.hpp"
#include "kmerge/policy.hpp"
#include "kmerge/synth.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace kmerge;
using fixture::policy;
using Catch::Matchers::WithinAbs;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected kmerge::Error");
    return ErrorCode::IoError;
}

std::map<int, LoraAdapter> stored_adapters(const ContinualMerger& m) {
    std::map<int, LoraAdapter> out;
    for (const auto& [k, slot] : m.store().slots) {
        out.emplace(k, slot.adapter);
    }
    return out;
}

Suite suite40(std::uint64_t seed = 0) { return generate_suite(fixture::small_generator(seed, 5, 8)); }

} // namespace

TEST_CASE("first arrival opens slot 1", "[policy]") {
    ContinualMerger m(policy(3));
    auto d = m.ingest(fixture::unit_outer("a", 0, 0));
    CHECK(d.task_index == 1);
    CHECK(d.action == IngestAction::allocated_new_slot);
    CHECK(d.slot_key == 1);
    CHECK_FALSE(d.similarity.has_value());
    CHECK(d.occupied_after == 1);
    CHECK(m.route(1) == 1);
}

TEST_CASE("a budget of one forces every later arrival to merge", "[policy]") {
    ContinualMerger m(policy(1, Variant::k_merge, std::nullopt, 1));
    m.ingest(fixture::unit_outer("a", 0, 0));
    auto d = m.ingest(fixture::unit_outer("b", 1, 1));
    CHECK(d.action == IngestAction::merged_into);
    CHECK(d.slot_key == 1);
    REQUIRE(d.similarity.has_value());
    CHECK(*d.similarity == 0.0);
    CHECK(m.history().tasks(1) == std::vector<int>{1, 2});
    CHECK(m.route(2) == 1);
}

TEST_CASE("K-Merge++ opens a slot when nothing clears the threshold", "[policy]") {
    ContinualMerger m(policy(5, Variant::k_merge_pp, 0.020, 1));
    m.ingest(fixture::unit_outer("a", 0, 0));
    m.ingest(fixture::unit_outer("b", 1, 1));
    REQUIRE(m.occupied() == 2);
    auto d = m.ingest(fixture::unit_outer("c", 2, 2));
    REQUIRE(d.similarity.has_value());
    CHECK(*d.similarity < 0.020);
    CHECK(d.action == IngestAction::allocated_new_slot);
    CHECK(d.slot_key == 3);
    auto e = m.ingest(fixture::unit_outer("d", 1, 1, 4, 1, 3.0));
    CHECK(e.action == IngestAction::merged_into);
    CHECK(e.slot_key == 2);
}

TEST_CASE("decisions follow the reference policy over a 40-task stream", "[policy]") {
    auto suite = suite40(4);
    auto order = make_ordering(suite.tasks, {OrderingKind::random, 9});
    for (auto [variant, s] : {std::pair{Variant::k_merge, std::optional<double>{}},
                              std::pair{Variant::k_merge_pp, std::optional<double>{0.3}}}) {
        const int k = 5;
        ContinualMerger m(policy(k, variant, s));
        for (int idx : order) {
            const auto& in = suite.adapters[static_cast<std::size_t>(idx)];
            auto want = oracle::policy_step(variant == Variant::k_merge_pp, k, s, stored_adapters(m),
                                            m.history().next_slot_key(), in);
            auto got = m.ingest(in);
            REQUIRE((got.action == IngestAction::merged_into) == want.merge);
            REQUIRE(got.slot_key == want.slot_key);
            REQUIRE(got.similarity.has_value() == want.similarity.has_value());
            if (want.similarity) {
                REQUIRE_THAT(*got.similarity, WithinAbs(*want.similarity, 1e-9));
            }
        }
        // The history partitions the 40 timesteps.
        std::set<int> seen;
        const MergeHistory history = m.history();
        for (const auto& [key, tasks] : history.entries()) {
            for (int t : tasks) {
                CHECK(seen.insert(t).second);
                CHECK(m.route(t) == key);
            }
        }
        CHECK(seen.size() == 40);
        CHECK(*seen.begin() == 1);
        CHECK(*seen.rbegin() == 40);
    }
}

TEST_CASE("K-Merge occupancy is min(t, K)", "[policy]") {
    auto suite = suite40(5);
    for (int k : {1, 3, 7, 40}) {
        ContinualMerger m(policy(k));
        for (std::size_t i = 0; i < suite.size(); ++i) {
            auto d = m.ingest(suite.adapters[i]);
            const int t = static_cast<int>(i) + 1;
            REQUIRE(d.occupied_after == std::min(t, k));
            REQUIRE(d.similarity.has_value() == (t > k));
        }
    }
}

TEST_CASE("K-Merge++ merges exactly when full or above threshold", "[policy]") {
    auto suite = suite40(6);
    const double s = 0.25;
    ContinualMerger m(policy(6, Variant::k_merge_pp, s));
    int last = 0;
    for (const auto& a : suite.adapters) {
        const int before = m.occupied();
        auto d = m.ingest(a);
        CHECK(d.occupied_after >= last);
        CHECK(d.occupied_after <= 6);
        CHECK(d.similarity.has_value() == (before > 0));
        const bool merged = d.action == IngestAction::merged_into;
        CHECK(merged == (before == 6 || (before > 0 && *d.similarity >= s)));
        last = d.occupied_after;
    }
}

TEST_CASE("threshold extremes", "[policy]") {
    auto suite = suite40(7);
    ContinualMerger always(policy(5, Variant::k_merge_pp, -1.0));
    for (const auto& a : suite.adapters) {
        always.ingest(a);
    }
    CHECK(always.occupied() == 1);

    ContinualMerger never(policy(5, Variant::k_merge_pp, 2.0));
    ContinualMerger plain(policy(5));
    for (const auto& a : suite.adapters) {
        auto x = never.ingest(a);
        auto y = plain.ingest(a);
        CHECK(x.slot_key == y.slot_key);
    }
    CHECK(never.history() == plain.history());
}

TEST_CASE("a slot does not depend on its arrival order", "[policy]") {
    std::mt19937_64 rng(8);
    std::vector<LoraAdapter> in;
    for (int i = 0; i < 4; ++i) {
        in.push_back(oracle::random_adapter(rng, "x" + std::to_string(i), 1, 12, 10, 2));
    }
    std::vector<int> perm{0, 1, 2, 3};
    std::optional<std::map<LayerKey, MatrixD>> first;
    do {
        ContinualMerger m(policy(1, Variant::k_merge, std::nullopt, 3));
        for (int i : perm) {
            m.ingest(in[static_cast<std::size_t>(i)]);
        }
        auto served = m.load_for_inference(1);
        auto dense = oracle::deltas(served);
        if (!first) {
            first = dense;
        } else {
            for (const auto& [k, d] : dense) {
                REQUIRE(oracle::relative_diff(d, first->at(k)) < 1e-5);
            }
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST_CASE("served adapter equals an external refactor of the mean", "[policy]") {
    std::mt19937_64 rng(9);
    std::vector<LoraAdapter> in;
    for (int i = 0; i < 3; ++i) {
        in.push_back(oracle::random_adapter(rng, "x" + std::to_string(i), 2, 10, 9, 2));
    }
    ContinualMerger m(policy(1, Variant::k_merge, std::nullopt, 2));
    for (const auto& a : in) {
        m.ingest(a);
    }
    auto served = m.load_for_task(3);
    for (const auto& key : in[0].keys()) {
        MatrixD mean = (oracle::delta(in[0], key) + oracle::delta(in[1], key) + oracle::delta(in[2], key)) / 3.0;
        // Rank-2 truncation by dense SVD.
        Eigen::BDCSVD<MatrixD> svd(mean, Eigen::ComputeThinU | Eigen::ComputeThinV);
        MatrixD want = svd.matrixU().leftCols(2) * svd.singularValues().head(2).asDiagonal() *
                       svd.matrixV().leftCols(2).transpose();
        CHECK(oracle::relative_diff(materialize_delta(served, key), want) < 1e-5);
    }
    CHECK(served.rank == 2);
}

TEST_CASE("lookup and ingest errors", "[policy]") {
    ContinualMerger m(policy(2));
    auto a = fixture::unit_outer("a", 0, 0);
    m.ingest(a);
    CHECK(code_of([&] { (void)m.route(7); }) == ErrorCode::UnknownTask);
    CHECK(code_of([&] { (void)m.load_for_inference(2); }) == ErrorCode::SlotVacant);
    CHECK(code_of([&] { (void)m.task_index_of("zzz"); }) == ErrorCode::UnknownTask);
    CHECK(m.task_index_of("a") == 1);
    CHECK(code_of([&] { (void)m.ingest(a); }) == ErrorCode::DuplicateTask);
    CHECK(code_of([&] { (void)m.ingest(fixture::unit_outer("b", 0, 0, 5)); }) == ErrorCode::IncompatibleAdapters);
    // Rejected arrivals leave the state untouched.
    CHECK(m.timestep() == 1);
    CHECK(m.occupied() == 1);
}

TEST_CASE("policy configuration is validated", "[policy]") {
    CHECK(code_of([] { ContinualMerger m(policy(0)); }) == ErrorCode::ConfigError);
    CHECK(code_of([] { ContinualMerger m(policy(2, Variant::k_merge_pp)); }) == ErrorCode::ConfigError);
    CHECK(code_of([] { ContinualMerger m(policy(2, Variant::k_merge, 0.5)); }) == ErrorCode::ConfigError);
    CHECK(code_of([] { ContinualMerger m(policy(2, Variant::k_merge_pp, std::nan(""))); }) == ErrorCode::ConfigError);
    CHECK(code_of([] { ContinualMerger m(policy(2, Variant::k_merge, std::nullopt, 0)); }) == ErrorCode::ConfigError);
    auto c = policy(2);
    c.rank_policy.mode = RankMode::factor_average;
    c.merge_operator.kind = MergeKind::ties;
    CHECK(code_of([&] { ContinualMerger m(c); }) == ErrorCode::UnsupportedMode);
    CHECK(parse_variant("k_merge_pp") == Variant::k_merge_pp);
    CHECK(code_of([] { (void)parse_variant("k_merge_xl"); }) == ErrorCode::ConfigError);
}

TEST_CASE("factor_average storage keeps the input rank", "[policy]") {
    auto suite = suite40(10);
    auto c = policy(2);
    c.rank_policy.mode = RankMode::factor_average;
    ContinualMerger m(c);
    for (std::size_t i = 0; i < 6; ++i) {
        m.ingest(suite.adapters[i]);
    }
    CHECK(m.load_for_inference(1).rank == suite.config.rank);
    CHECK(m.occupied() == 2);
}

TEST_CASE("merge history bookkeeping", "[policy]") {
    MergeHistory h;
    CHECK(h.allocate(1) == 1);
    CHECK(h.allocate(2) == 2);
    h.append(1, 3);
    CHECK(h.route(3) == 1);
    CHECK(h.tasks(1) == std::vector<int>{1, 3});
    CHECK(code_of([&] { h.append(2, 3); }) == ErrorCode::DuplicateTask);
    CHECK(code_of([&] { h.append(9, 4); }) == ErrorCode::SlotVacant);
    CHECK(code_of([&] { (void)MergeHistory::from_entries({{1, {1, 2}}, {2, {2}}}, 3); }) == ErrorCode::RestoreError);
    auto r = MergeHistory::from_entries(h.entries(), h.next_slot_key());
    CHECK(r == h);
}

TEST_CASE("readers run alongside ingest", "[policy]") {
    auto suite = suite40(11);
    ContinualMerger m(policy(4));
    m.ingest(suite.adapters[0]);
    std::atomic<bool> done{false};
    std::atomic<int> failures{0};
    std::vector<std::thread> readers;
    for (int r = 0; r < 3; ++r) {
        readers.emplace_back([&] {
            while (!done.load()) {
                const int t = m.timestep();
                const int slot = m.route(1);
                auto a = m.load_for_inference(slot);
                if (a.layers.size() != suite.adapters[0].layers.size() || m.occupied() > 4 || t < 1) {
                    ++failures;
                }
            }
        });
    }
    for (std::size_t i = 1; i < suite.size(); ++i) {
        m.ingest(suite.adapters[i]);
    }
    done = true;
    for (auto& t : readers) {
        t.join();
    }
    CHECK(failures == 0);
    CHECK(m.timestep() == 40);
}
