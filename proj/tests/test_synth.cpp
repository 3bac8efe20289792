// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include "catch_amalgamated.hpp"
#include "kmerge/error.hpp"
#include "kmerge/similarity.hpp"
#include "kmerge/synth.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace kmerge;
using Catch::Matchers::WithinAbs;

namespace {

struct GroupMeans {
    double same_type = 0.0;
    double same_lang = 0.0;
    double cross = 0.0;
};

GroupMeans group_means(const Suite& s) {
    double acc[3] = {0, 0, 0};
    int n[3] = {0, 0, 0};
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t j = i + 1; j < s.size(); ++j) {
            const bool type = s.tasks[i].problem_type == s.tasks[j].problem_type;
            const bool lang = s.tasks[i].language == s.tasks[j].language;
            const int g = type ? 0 : (lang ? 1 : 2);
            acc[g] += oracle::similarity(s.adapters[i], s.adapters[j]);
            ++n[g];
        }
    }
    return {acc[0] / n[0], acc[1] / n[1], acc[2] / n[2]};
}

} // namespace

TEST_CASE("default grid has 40 labelled rank-r adapters", "[synth]") {
    GeneratorConfig g;
    g.num_layers = 2;
    auto s = generate_suite(g);
    REQUIRE(s.size() == 40);
    std::set<std::string> ids;
    std::set<std::string> types;
    std::set<std::string> langs;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto& a = s.adapters[i];
        CHECK(s.tasks[i].index == static_cast<int>(i));
        CHECK(a.task_id == s.tasks[i].task_id);
        CHECK(a.problem_type == s.tasks[i].problem_type);
        CHECK(a.rank == g.rank);
        CHECK(a.layers.size() == 8);
        CHECK_NOTHROW(a.validate());
        ids.insert(a.task_id);
        types.insert(a.problem_type);
        langs.insert(a.language);
    }
    CHECK(ids.size() == 40);
    CHECK(types.size() == 5);
    CHECK(langs.size() == 8);
    // Row-major grid: task i has type i / beta.
    CHECK(s.tasks[9].problem_type == s.tasks[8].problem_type);
    CHECK(s.tasks[9].language == s.tasks[1].language);
}

TEST_CASE("without language and noise, a type is a single update", "[synth]") {
    auto g = fixture::small_generator(3, 3, 3);
    for (auto& p : g.projections) {
        p = {64, 64};
    }
    g.lang_strength = 0.0;
    g.noise_strength = 0.0;
    auto s = generate_suite(g);
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t j = i + 1; j < s.size(); ++j) {
            const double v = oracle::similarity(s.adapters[i], s.adapters[j]);
            if (s.tasks[i].problem_type == s.tasks[j].problem_type) {
                CHECK_THAT(v, WithinAbs(1.0, 1e-6));
            } else {
                CHECK(std::abs(v) < 0.1);
            }
        }
    }
}

TEST_CASE("similarity structure: type over language over unrelated", "[synth]") {
    auto s = generate_suite(fixture::small_generator(4, 5, 8));
    auto m = group_means(s);
    CHECK(m.same_type > m.same_lang);
    CHECK(m.same_lang > m.cross);
}

TEST_CASE("generation is deterministic in the seed", "[synth]") {
    auto a = generate_suite(fixture::small_generator(12, 2, 3));
    auto b = generate_suite(fixture::small_generator(12, 2, 3));
    auto c = generate_suite(fixture::small_generator(13, 2, 3));
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.adapters[i] == b.adapters[i]);
        CHECK_FALSE(a.adapters[i] == c.adapters[i]);
    }
}

TEST_CASE("calibration suite uses held-out labels", "[synth]") {
    auto g = fixture::small_generator(5, 5, 8);
    auto cal = generate_calibration_suite(g, 99);
    REQUIRE(cal.size() == 4);
    auto train = generate_suite(g);
    std::set<std::string> seen_types;
    for (const auto& t : train.tasks) {
        seen_types.insert(t.problem_type);
    }
    std::map<std::string, int> per_type;
    for (const auto& t : cal.tasks) {
        CHECK_FALSE(seen_types.contains(t.problem_type));
        ++per_type[t.problem_type];
    }
    CHECK(per_type.size() == 2);
    CHECK(per_type.begin()->second == 3);
    CHECK(per_type.rbegin()->second == 1);
}

TEST_CASE("orderings", "[synth]") {
    auto s = generate_suite(fixture::small_generator(6, 5, 8));
    auto worst = make_ordering(s.tasks, {OrderingKind::worst, 0});
    // Same-type tasks arrive consecutively.
    int switches = 0;
    for (std::size_t i = 1; i < worst.size(); ++i) {
        switches += s.tasks[static_cast<std::size_t>(worst[i])].problem_type !=
                    s.tasks[static_cast<std::size_t>(worst[i - 1])].problem_type;
    }
    CHECK(switches == 4);

    auto pt = make_ordering(s.tasks, {OrderingKind::problem_types, 0});
    std::set<std::string> first;
    for (std::size_t i = 0; i < 5; ++i) {
        first.insert(s.tasks[static_cast<std::size_t>(pt[i])].problem_type);
    }
    CHECK(first.size() == 5);

    auto r1 = make_ordering(s.tasks, {OrderingKind::random, 1});
    auto r2 = make_ordering(s.tasks, {OrderingKind::random, 1});
    auto r3 = make_ordering(s.tasks, {OrderingKind::random, 2});
    CHECK(r1 == r2);
    CHECK(r1 != r3);
    for (const auto& o : {worst, pt, r1}) {
        std::vector<int> sorted = o;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            REQUIRE(sorted[i] == static_cast<int>(i));
        }
    }
    CHECK(parse_ordering("problem_types") == OrderingKind::problem_types);
    CHECK_THROWS_AS(parse_ordering("best"), Error);
}

TEST_CASE("suites round trip through a directory", "[synth]") {
    fixture::TempDir dir("suite");
    auto s = generate_suite(fixture::small_generator(7, 2, 2));
    write_suite(s, dir.path());
    CHECK(std::filesystem::exists(dir / "tasks.json"));
    auto r = read_suite(dir.path());
    REQUIRE(r.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(r.adapters[i] == s.adapters[i]);
        CHECK(r.tasks[i].task_id == s.tasks[i].task_id);
        CHECK(r.tasks[i].language == s.tasks[i].language);
    }
    CHECK(generator_to_json(r.config) == generator_to_json(s.config));
    CHECK(read_adapter_directory(dir.path()).size() == 4);
}

TEST_CASE("generator configuration is validated", "[synth]") {
    auto g = fixture::small_generator();
    g.rank = 2;
    try {
        (void)generate_suite(g);
        FAIL("expected ConfigError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigError);
    }
    g = fixture::small_generator();
    g.rank = 13;
    CHECK_THROWS_AS(g.validate(), Error);
    g = fixture::small_generator();
    g.type_strength = 0.0;
    CHECK_THROWS_AS(g.validate(), Error);
    CHECK_NOTHROW(GeneratorConfig::full_scale().validate());
}
