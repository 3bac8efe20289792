// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the kmerge binary.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "catch_amalgamated.hpp"
#include "kmerge/adapter_io.hpp"
#include "kmerge/synth.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace kmerge;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result kmerge_cli(const std::string& args) {
    const std::string cmd = std::string(KMERGE_CLI_PATH) + " " + args + " 2>/dev/null";
    Result r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) {
        r.out.append(buf, n);
    }
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::size_t count_kmrg(const fs::path& dir) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        n += e.path().extension() == ".kmrg";
    }
    return n;
}

const char* kSmall = "--layers 2 --d-in 16 --d-out 12";

} // namespace

TEST_CASE("cli: version and usage errors", "[cli]") {
    auto v = kmerge_cli("--version");
    CHECK(v.code == 0);
    CHECK_THAT(v.out, ContainsSubstring("kmerge 0.1.0"));
    CHECK(kmerge_cli("frobnicate").code == 2);
    CHECK(kmerge_cli("gen").code == 2);
    CHECK(kmerge_cli("run --suite /nonexistent/suite --k 2").code == 2);
}

TEST_CASE("cli: gen writes a suite and is reproducible", "[cli]") {
    fixture::TempDir dir("cli_gen");
    REQUIRE(kmerge_cli("gen --alpha 5 --beta 8 --seed 3 " + std::string(kSmall) + " --out " + q(dir / "a")).code == 0);
    CHECK(count_kmrg(dir / "a") == 40);
    CHECK(fs::exists(dir / "a" / "tasks.json"));
    REQUIRE(kmerge_cli("gen --alpha 5 --beta 8 --seed 3 " + std::string(kSmall) + " --out " + q(dir / "b")).code == 0);
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
    }
    REQUIRE(kmerge_cli("gen --alpha 1 --beta 1 " + std::string(kSmall) + " --out " + q(dir / "one")).code == 0);
    CHECK(count_kmrg(dir / "one") == 1);
    CHECK(kmerge_cli("gen --rank 2 " + std::string(kSmall) + " --out " + q(dir / "bad")).code == 2);
}

TEST_CASE("cli: calibrate prints the median pairwise similarity", "[cli]") {
    fixture::TempDir dir("cli_cal");
    REQUIRE(kmerge_cli("gen --alpha 2 --beta 5 --seed 4 " + std::string(kSmall) + " --out " + q(dir / "ten")).code == 0);
    auto adapters = read_adapter_directory(dir / "ten");
    REQUIRE(adapters.size() == 10);
    std::vector<double> sims;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        for (std::size_t j = i + 1; j < adapters.size(); ++j) {
            sims.push_back(oracle::similarity(adapters[i], adapters[j]));
        }
    }
    auto r = kmerge_cli("calibrate " + q(dir / "ten"));
    REQUIRE(r.code == 0);
    CHECK_THAT(std::stod(r.out), WithinAbs(oracle::median(sims), 1e-9));

    fs::create_directories(dir / "two");
    fs::copy_file(dir / "ten" / (adapters[0].task_id + ".kmrg"), dir / "two" / "a.kmrg");
    fs::copy_file(dir / "ten" / (adapters[1].task_id + ".kmrg"), dir / "two" / "b.kmrg");
    auto two = kmerge_cli("calibrate --json " + q(dir / "two"));
    REQUIRE(two.code == 0);
    auto j = nlohmann::json::parse(two.out);
    CHECK(j["pairs"] == 1);
    CHECK_THAT(j["threshold_s"].get<double>(), WithinAbs(oracle::similarity(adapters[0], adapters[1]), 1e-9));

    fs::create_directories(dir / "lone");
    fs::copy_file(dir / "two" / "a.kmrg", dir / "lone" / "a.kmrg");
    CHECK(kmerge_cli("calibrate " + q(dir / "lone")).code == 1);
}

TEST_CASE("cli: run writes reports, trajectories and a store", "[cli]") {
    fixture::TempDir dir("cli_run");
    REQUIRE(kmerge_cli("gen --seed 5 " + std::string(kSmall) + " --out " + q(dir / "suite")).code == 0);

    REQUIRE(kmerge_cli("run --suite " + q(dir / "suite") + " --k 40 --seeds 1 --out " + q(dir / "full")).code == 0);
    auto report = nlohmann::json::parse(slurp(dir / "full" / "report.json"));
    CHECK(report["schema_version"] == 1);
    CHECK_THAT(report["cells"][0]["runs"][0]["final_S"].get<double>(), WithinAbs(1.0, 1e-12));

    const std::string args = "run --suite " + q(dir / "suite") + " --k 3,5 --variant k_merge_pp --threshold 0.3 --seeds 1,2";
    REQUIRE(kmerge_cli(args + " --out " + q(dir / "r1")).code == 0);
    REQUIRE(kmerge_cli(args + " --parallel --out " + q(dir / "r2")).code == 0);
    std::size_t csvs = 0;
    for (const auto& e : fs::directory_iterator(dir / "r1")) {
        CHECK(slurp(e.path()) == slurp(dir / "r2" / e.path().filename()));
        csvs += e.path().extension() == ".csv";
    }
    CHECK(csvs == 4);
    CHECK(fs::exists(dir / "r1" / "trajectory_k5_seed2.csv"));

    REQUIRE(kmerge_cli("run --suite " + q(dir / "suite") + " --k 4 --ordering worst --store-dir " + q(dir / "store")).code ==
            0);
    CHECK(fs::exists(dir / "store" / "manifest.json"));
    auto restored = ContinualMerger::restore(dir / "store");
    CHECK(restored.timestep() == 40);
    CHECK(restored.occupied() == 4);

    auto routed = kmerge_cli("route --store " + q(dir / "store") + " --task 40");
    REQUIRE(routed.code == 0);
    CHECK(std::stoi(routed.out) == restored.route(40));
    const std::string id = restored.task_ids().at(7);
    auto by_id = kmerge_cli("route --store " + q(dir / "store") + " --task-id " + id);
    CHECK(std::stoi(by_id.out) == restored.route(7));
    CHECK(kmerge_cli("route --store " + q(dir / "store") + " --task 99").code == 1);

    auto inspect = kmerge_cli("inspect --store " + q(dir / "store"));
    CHECK(inspect.code == 0);
    CHECK(nlohmann::json::parse(inspect.out).is_object());

    CHECK(kmerge_cli("run --suite " + q(dir / "suite") + " --k 3 --variant k_merge_pp").code == 2);
    CHECK(kmerge_cli("run --suite " + q(dir / "suite") + " --k 3 --operator slerp").code == 2);
    CHECK(kmerge_cli("route --store " + q(dir / "suite") + " --task 1").code == 1);
}

TEST_CASE("cli: merge two adapters", "[cli]") {
    fixture::TempDir dir("cli_merge");
    REQUIRE(kmerge_cli("gen --alpha 1 --beta 2 --seed 6 " + std::string(kSmall) + " --out " + q(dir / "in")).code == 0);
    auto in = read_adapter_directory(dir / "in");
    REQUIRE(in.size() == 2);
    const auto a = dir / "in" / (in[0].task_id + ".kmrg");
    const auto b = dir / "in" / (in[1].task_id + ".kmrg");
    auto r = kmerge_cli("merge " + q(a) + " " + q(b) + " --op linear --weight 0.5 --target-rank 8 --out " +
                        q(dir / "m.kmrg"));
    REQUIRE(r.code == 0);
    auto report = nlohmann::json::parse(r.out);
    CHECK(report["operator"]["kind"] == "linear");
    auto merged = read_adapter(dir / "m.kmrg");
    CHECK(merged.rank == 8);
    for (const auto& key : in[0].keys()) {
        MatrixD mean = (oracle::delta(in[0], key) + oracle::delta(in[1], key)) / 2.0;
        CHECK(oracle::relative_diff(oracle::delta(merged, key), mean) < 1e-5);
    }
    CHECK(kmerge_cli("merge " + q(a) + " " + q(b) + " --op ties --density 0 --out " + q(dir / "x.kmrg")).code == 2);
}

TEST_CASE("cli: similarity matrix and geometry", "[cli]") {
    fixture::TempDir dir("cli_sim");
    REQUIRE(kmerge_cli("gen --alpha 2 --beta 2 --seed 8 " + std::string(kSmall) + " --out " + q(dir / "in")).code == 0);
    auto r = kmerge_cli("sim " + q(dir / "in") + " --csv " + q(dir / "s.csv"));
    REQUIRE(r.code == 0);
    CHECK_THAT(r.out, ContainsSubstring("4 adapters, 6 pairs"));
    std::ifstream csv(dir / "s.csv");
    std::string line;
    std::getline(csv, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(csv, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        auto& row = rows.emplace_back();
        while (std::getline(ss, cell, ',')) {
            row.push_back(std::stod(cell));
        }
    }
    REQUIRE(rows.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(rows[i][i] == 1.0);
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(rows[i][j] == rows[j][i]);
        }
    }

    auto g = kmerge_cli("inspect --geometry llama-3.2-1b --rank 32");
    REQUIRE(g.code == 0);
    CHECK(nlohmann::json::parse(g.out)["parameters"] == 22'544'384);
    CHECK(kmerge_cli("inspect --geometry gpt-9").code == 2);
}
