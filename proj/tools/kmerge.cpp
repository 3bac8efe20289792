// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// kmerge command-line front end.
//
// Exit codes: 0 success, 1 runtime or domain error, 2 usage or config error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kmerge/adapter_io.hpp"
#include "kmerge/bench.hpp"
#include "kmerge/config_json.hpp"
#include "kmerge/error.hpp"
#include "kmerge/merge_ops.hpp"
#include "kmerge/policy.hpp"
#include "kmerge/refactor.hpp"
#include "kmerge/similarity.hpp"
#include "kmerge/storage.hpp"
#include "kmerge/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kmerge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::ConfigError, "cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) {
        throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
    int alpha = 5;
    int beta = 8;
    std::uint64_t seed = 0;
    int rank = 4;
    double scale = 16.0;
    int layers = 4;
    int d_in = 64;
    int d_out = 64;
    double type_strength = 1.0;
    double lang_strength = 0.5;
    double noise_strength = 0.3;
    bool full_scale = false;
    bool calibration = false;
    fs::path out;
};

int cmd_gen(const GenArgs& a, const CLI::App& app) {
    GeneratorConfig c = a.full_scale ? GeneratorConfig::full_scale() : GeneratorConfig{};
    c.alpha_types = a.alpha;
    c.beta_langs = a.beta;
    c.seed = a.seed;
    // Flags given explicitly override the full-scale preset.
    auto given = [&app](const char* name) { return app.count(name) > 0; };
    if (!a.full_scale || given("--rank")) c.rank = a.rank;
    if (!a.full_scale || given("--scale")) c.scale_numerator = a.scale;
    if (!a.full_scale || given("--layers")) c.num_layers = a.layers;
    if (!a.full_scale || given("--d-in") || given("--d-out")) {
        c.projections.fill({a.d_in, a.d_out});
    }
    c.type_strength = a.type_strength;
    c.lang_strength = a.lang_strength;
    c.noise_strength = a.noise_strength;
    c.validate();
    const Suite suite = a.calibration ? generate_calibration_suite(c, a.seed) : generate_suite(c);
    write_suite(suite, a.out);
    std::cout << "wrote " << suite.size() << " adapters to " << a.out.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// calibrate

int cmd_calibrate(const fs::path& dir, bool as_json) {
    const auto held = read_adapter_directory(dir);
    const double s = calibrate_threshold(held);
    if (as_json) {
        std::cout << json{{"threshold_s", s}, {"adapters", held.size()}, {"pairs", held.size() * (held.size() - 1) / 2}}.dump(2)
                  << "\n";
    } else {
        std::cout << real(s) << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// run

struct RunArgs {
    fs::path suite;
    fs::path config;
    std::vector<int> k;
    std::string variant = "k_merge";
    std::vector<double> thresholds;
    fs::path threshold_from;
    std::string op = "running_average";
    double density = 0.5;
    double drop_rate = 0.5;
    double weight = 0.5;
    std::uint64_t op_seed = 0;
    std::string rank_mode = "svd_truncate";
    int target_rank = 0;
    std::string ordering = "random";
    std::vector<std::uint64_t> seeds{0};
    fs::path out;
    fs::path store_dir;
    bool parallel = false;
    bool timing = false;
};

struct Cell {
    PolicyConfig config;
    std::uint64_t seed = 0;
    std::string tag;
};

PolicyConfig policy_from_flags(const RunArgs& a, int suite_rank) {
    PolicyConfig c;
    c.variant = parse_variant(a.variant);
    c.merge_operator.kind = parse_merge_kind(a.op);
    c.merge_operator.density = a.density;
    c.merge_operator.drop_rate = a.drop_rate;
    c.merge_operator.weight = a.weight;
    c.merge_operator.seed = a.op_seed;
    c.rank_policy.mode = parse_rank_mode(a.rank_mode);
    c.rank_policy.target_rank = a.target_rank > 0 ? a.target_rank : suite_rank;
    return c;
}

int cmd_run(const RunArgs& a) {
    // Validate everything that does not need the suite before reading it.
    if (!a.config.empty() && (!a.k.empty() || !a.thresholds.empty())) {
        throw Error(ErrorCode::ConfigError, "--config cannot be combined with --k or --threshold");
    }
    if (a.config.empty() && a.k.empty()) {
        throw Error(ErrorCode::ConfigError, "run needs --k or --config");
    }
    if (!a.thresholds.empty() && !a.threshold_from.empty()) {
        throw Error(ErrorCode::ConfigError, "--threshold and --threshold-from are mutually exclusive");
    }
    const OrderingKind ordering = parse_ordering(a.ordering);
    std::optional<PolicyConfig> from_file;
    if (!a.config.empty()) {
        const json j = read_json_file(a.config);
        from_file = policy_from_json(j.contains("policy") ? j.at("policy") : j);
        from_file->validate();
    } else {
        PolicyConfig probe = policy_from_flags(a, 1);
        probe.budget_k = 1;
        if (probe.variant == Variant::k_merge_pp && a.thresholds.empty() && a.threshold_from.empty()) {
            throw Error(ErrorCode::ConfigError, "k_merge_pp needs --threshold or --threshold-from");
        }
        if (probe.variant == Variant::k_merge && (!a.thresholds.empty() || !a.threshold_from.empty())) {
            throw Error(ErrorCode::ConfigError, "k_merge takes no threshold");
        }
        probe.threshold_s = probe.variant == Variant::k_merge_pp ? std::optional<double>(0.0) : std::nullopt;
        probe.validate();
    }

    const Suite suite = read_suite(a.suite);
    std::vector<Cell> cells;
    if (from_file) {
        for (auto seed : a.seeds) {
            cells.push_back({*from_file, seed, "k" + std::to_string(from_file->budget_k)});
        }
    } else {
        std::vector<std::optional<double>> thresholds;
        if (!a.threshold_from.empty()) {
            thresholds.push_back(calibrate_threshold(read_adapter_directory(a.threshold_from)));
        }
        for (double s : a.thresholds) {
            thresholds.push_back(s);
        }
        if (thresholds.empty()) {
            thresholds.push_back(std::nullopt);
        }
        for (int k : a.k) {
            for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
                PolicyConfig c = policy_from_flags(a, suite.config.rank);
                c.budget_k = k;
                c.threshold_s = thresholds[ti];
                c.validate();
                std::string tag = "k" + std::to_string(k);
                if (thresholds.size() > 1) {
                    tag += "_t" + std::to_string(ti);
                }
                for (auto seed : a.seeds) {
                    cells.push_back({c, seed, tag});
                }
            }
        }
    }

    const bool single = cells.size() == 1;
    auto execute = [&](const Cell& cell) {
        SimulationOptions opt;
        if (!a.store_dir.empty()) {
            opt.store_dir = single ? a.store_dir : a.store_dir / (cell.tag + "_seed" + std::to_string(cell.seed));
        }
        return run_simulation(suite, {ordering, cell.seed}, cell.config, opt);
    };
    std::vector<SimulationRun> runs;
    if (a.parallel) {
        std::vector<std::future<SimulationRun>> jobs;
        for (const auto& cell : cells) {
            jobs.push_back(std::async(std::launch::async, execute, std::cref(cell)));
        }
        for (auto& j : jobs) {
            runs.push_back(j.get());
        }
    } else {
        for (const auto& cell : cells) {
            runs.push_back(execute(cell));
        }
    }

    // Group runs of the same policy into one report entry.
    json report = {{"schema_version", kReportSchemaVersion},
                   {"suite", a.suite.string()},
                   {"ordering", std::string(to_string(ordering))},
                   {"seeds", a.seeds},
                   {"cells", json::array()}};
    const std::size_t per_cell = a.seeds.size();
    for (std::size_t first = 0; first < runs.size(); first += per_cell) {
        std::vector<SimulationRun> group(runs.begin() + static_cast<std::ptrdiff_t>(first),
                                         runs.begin() + static_cast<std::ptrdiff_t>(first + per_cell));
        const SimulationReport r = summarize(cells[first].config, std::move(group));
        json entry = report_to_json(r, a.timing);
        entry.erase("schema_version");
        entry["tag"] = cells[first].tag;
        report["cells"].push_back(std::move(entry));
        for (std::size_t i = 0; i < r.runs.size(); ++i) {
            if (!a.out.empty()) {
                const Cell& cell = cells[first + i];
                fs::create_directories(a.out);
                write_trajectory_csv(r.runs[i], a.out / ("trajectory_" + cell.tag + "_seed" + std::to_string(cell.seed) + ".csv"),
                                     a.timing);
            }
        }
        std::printf("%-10s %-10s s=%-10s final S mean %.6f std %.6f consistency %.4f\n", cells[first].tag.c_str(),
                    std::string(to_string(r.config.variant)).c_str(),
                    r.config.threshold_s ? real(*r.config.threshold_s).substr(0, 8).c_str() : "-", r.mean_final_score,
                    r.std_final_score, r.mean_consistency);
    }
    if (!a.out.empty()) {
        write_text(a.out / "report.json", report.dump(2) + "\n");
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// merge

struct MergeArgs {
    std::vector<fs::path> inputs;
    std::string op = "linear";
    double weight = 0.5;
    double density = 0.5;
    double drop_rate = 0.5;
    std::uint64_t seed = 0;
    int stored_count = 1;
    std::string rank_mode = "svd_truncate";
    int target_rank = 0;
    std::string task_id = "merged";
    fs::path out;
    fs::path report;
};

int cmd_merge(const MergeArgs& a) {
    MergeOperator op;
    op.kind = parse_merge_kind(a.op);
    op.weight = a.weight;
    op.density = a.density;
    op.drop_rate = a.drop_rate;
    op.seed = a.seed;
    op.validate();
    RankPolicy rank;
    rank.mode = parse_rank_mode(a.rank_mode);
    if (rank.mode == RankMode::factor_average && op.kind != MergeKind::running_average && op.kind != MergeKind::linear) {
        throw Error(ErrorCode::ConfigError, "factor_average only pairs with the running_average or linear operators");
    }
    if (a.stored_count < 1) {
        throw Error(ErrorCode::ConfigError, "--stored-count must be >= 1");
    }

    const LoraAdapter x = read_adapter(a.inputs[0]);
    const LoraAdapter y = read_adapter(a.inputs[1]);
    require_compatible(x, y);
    rank.target_rank = a.target_rank > 0 ? a.target_rank : x.rank;
    rank.validate();
    const AdapterMetadata meta{a.task_id, x.problem_type == y.problem_type ? x.problem_type : "mixed",
                               x.language == y.language ? x.language : "mixed", x.scale_numerator};

    MergedDelta merged = apply_merge(op, to_delta_set(x), a.stored_count, to_delta_set(y));
    LoraAdapter out;
    std::map<LayerKey, double> residuals;
    if (rank.mode == RankMode::svd_truncate) {
        RefactorResult r = refactor(merged, rank, meta);
        out = std::move(r.adapter);
        residuals = std::move(r.residuals);
    } else {
        const double wx = op.kind == MergeKind::running_average ? a.stored_count / (a.stored_count + 1.0) : op.weight;
        out = factor_average(x, wx, y, 1.0 - wx, meta);
        for (const auto& [key, d] : merged.layers) {
            const MatrixD exact = d.to_dense();
            const double norm = exact.norm();
            residuals[key] = norm > 0.0 ? (materialize_delta(out, key) - exact).norm() / norm : 0.0;
        }
    }
    write_adapter(out, a.out);

    json per_layer = json::object();
    for (const auto& [key, v] : residuals) {
        per_layer[to_string(key)] = v;
    }
    const json report = {{"operator",
                          {{"kind", std::string(to_string(op.kind))},
                           {"weight", op.weight},
                           {"density", op.density},
                           {"drop_rate", op.drop_rate},
                           {"seed", op.seed}}},
                         {"rank_policy", {{"mode", std::string(to_string(rank.mode))}, {"target_rank", rank.target_rank}}},
                         {"inputs", {a.inputs[0].string(), a.inputs[1].string()}},
                         {"output", a.out.string()},
                         {"residuals", per_layer},
                         {"merge_count", merged.merge_count}};
    if (!a.report.empty()) {
        write_text(a.report, report.dump(2) + "\n");
    } else {
        std::cout << report.dump(2) << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// sim

int cmd_sim(const fs::path& dir, const fs::path& csv, const fs::path& pairs_csv) {
    const auto adapters = read_adapter_directory(dir);
    const SimilarityMatrix m = similarity_matrix(adapters);
    if (!csv.empty()) {
        write_similarity_csv(m, csv);
    }
    if (!pairs_csv.empty()) {
        std::ofstream out(pairs_csv);
        if (!out) {
            throw Error(ErrorCode::IoError, "cannot write " + pairs_csv.string());
        }
        out << "a,b,similarity,same_problem_type,same_language\n";
        char buf[32];
        for (std::size_t i = 0; i < adapters.size(); ++i) {
            for (std::size_t j = i + 1; j < adapters.size(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.6f", m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
                out << adapters[i].task_id << ',' << adapters[j].task_id << ',' << buf << ','
                    << (adapters[i].problem_type == adapters[j].problem_type ? 1 : 0) << ','
                    << (adapters[i].language == adapters[j].language ? 1 : 0) << '\n';
            }
        }
    }
    const auto sims = pairwise_similarities(adapters);
    const auto [lo, hi] = std::minmax_element(sims.begin(), sims.end());
    std::printf("%zu adapters, %zu pairs, min %.6f max %.6f median %.6f\n", adapters.size(), sims.size(), *lo, *hi,
                calibrate_threshold(adapters));
    return kExitOk;
}

// ---------------------------------------------------------------------------
// route

int cmd_route(const fs::path& store, std::optional<int> task, const std::string& task_id) {
    const ContinualMerger m = ContinualMerger::restore(store);
    const int t = task ? *task : m.task_index_of(task_id);
    std::cout << m.route(t) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// inspect

int cmd_inspect(const fs::path& store, const fs::path& adapter, const std::string& geometry, int rank) {
    if (!geometry.empty()) {
        const auto e = estimate_storage(geometry_preset(geometry), rank);
        std::cout << storage_to_json(e).dump(2) << "\n";
        return kExitOk;
    }
    if (!adapter.empty()) {
        const LoraAdapter x = read_adapter(adapter);
        const json j = {{"task_id", x.task_id},
                        {"problem_type", x.problem_type},
                        {"language", x.language},
                        {"rank", x.rank},
                        {"scale_numerator", x.scale_numerator},
                        {"layers", x.layers.size()},
                        {"parameters", lora_parameter_count(x)},
                        {"file_bytes", kmrg_file_bytes(x)},
                        {"file_bytes_on_disk", fs::file_size(adapter)}};
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    }
    const ContinualMerger m = ContinualMerger::restore(store);
    const AdapterStore s = m.store();
    const MergeHistory h = m.history();
    const auto ids = m.task_ids();
    json slots = json::array();
    std::int64_t total_bytes = 0;
    for (const auto& [key, slot] : s.slots) {
        json tasks = json::array();
        for (int t : h.tasks(key)) {
            tasks.push_back({{"index", t}, {"task_id", ids.at(t)}});
        }
        double worst = 0.0;
        for (const auto& [_, r] : slot.residuals) {
            worst = std::max(worst, r);
        }
        const std::int64_t bytes = kmrg_file_bytes(slot.adapter);
        total_bytes += bytes;
        slots.push_back({{"slot_key", key},
                         {"task_id", slot.adapter.task_id},
                         {"problem_type", slot.adapter.problem_type},
                         {"language", slot.adapter.language},
                         {"merge_count", slot.running.merge_count},
                         {"tasks", tasks},
                         {"parameters", lora_parameter_count(slot.adapter)},
                         {"file_bytes", bytes},
                         {"max_residual", worst}});
    }
    const json j = {{"policy", policy_to_json(m.config())},
                    {"timestep", m.timestep()},
                    {"occupied", m.occupied()},
                    {"budget_k", m.config().budget_k},
                    {"total_adapter_bytes", total_bytes},
                    {"slots", slots}};
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// timing

int cmd_timing(const GenArgs& g, int min_slots, int max_slots, int repeats, const fs::path& out) {
    GeneratorConfig c = GeneratorConfig::full_scale();
    c.alpha_types = 1;
    c.beta_langs = max_slots + repeats;
    c.seed = g.seed;
    const Suite pool = generate_suite(c);
    PolicyConfig base;
    base.rank_policy.target_rank = c.rank;
    const auto points = integration_timing(pool.adapters, base, min_slots, max_slots, repeats);
    json rows = json::array();
    for (const auto& p : points) {
        rows.push_back({{"stored_slots", p.stored_slots}, {"median_seconds", p.seconds}, {"samples", p.samples}});
        std::printf("K=%d median %.4f s\n", p.stored_slots, p.seconds);
    }
    if (!out.empty()) {
        write_text(out, json{{"generator", generator_to_json(c)}, {"points", rows}}.dump(2) + "\n");
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"kmerge: storage-budgeted continual merging of low-rank adapters"};
    app.require_subcommand(1);
    app.set_version_flag("--version",
                         "kmerge 0.1.0 (adapter format " + std::to_string(kAdapterFormatVersion) + ", manifest schema " +
                             std::to_string(kManifestVersion) + ", report schema " +
                             std::to_string(kReportSchemaVersion) + ")");

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic adapter suite");
    gen_cmd->add_option("--alpha", gen.alpha, "problem types")->capture_default_str();
    gen_cmd->add_option("--beta", gen.beta, "languages")->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
    gen_cmd->add_option("--rank", gen.rank)->capture_default_str();
    gen_cmd->add_option("--scale", gen.scale, "scale numerator (alpha in alpha / r)")->capture_default_str();
    gen_cmd->add_option("--layers", gen.layers)->capture_default_str();
    gen_cmd->add_option("--d-in", gen.d_in)->capture_default_str();
    gen_cmd->add_option("--d-out", gen.d_out)->capture_default_str();
    gen_cmd->add_option("--type-strength", gen.type_strength)->capture_default_str();
    gen_cmd->add_option("--lang-strength", gen.lang_strength)->capture_default_str();
    gen_cmd->add_option("--noise-strength", gen.noise_strength)->capture_default_str();
    gen_cmd->add_flag("--full-scale", gen.full_scale, "16 layers x 4 projections of width 2048, rank 32, scale 128");
    gen_cmd->add_flag("--calibration", gen.calibration, "emit the held-out calibration set instead of the grid");
    gen_cmd->add_option("--out", gen.out)->required();

    fs::path calib_dir;
    bool calib_json = false;
    auto* calib_cmd = app.add_subcommand("calibrate", "median pairwise similarity of a held-out directory");
    calib_cmd->add_option("dir", calib_dir)->required()->check(CLI::ExistingDirectory);
    calib_cmd->add_flag("--json", calib_json);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "stream a suite through the merger and score it");
    run_cmd->add_option("--suite", run.suite)->required()->check(CLI::ExistingDirectory);
    run_cmd->add_option("--config", run.config, "policy JSON (manifest schema)")->check(CLI::ExistingFile);
    run_cmd->add_option("--k", run.k, "storage budgets")->delimiter(',');
    run_cmd->add_option("--variant", run.variant)->capture_default_str();
    run_cmd->add_option("--threshold", run.thresholds, "K-Merge++ thresholds")->delimiter(',');
    run_cmd->add_option("--threshold-from", run.threshold_from, "calibrate the threshold on this directory")
        ->check(CLI::ExistingDirectory);
    run_cmd->add_option("--operator", run.op)->capture_default_str();
    run_cmd->add_option("--density", run.density)->capture_default_str();
    run_cmd->add_option("--drop-rate", run.drop_rate)->capture_default_str();
    run_cmd->add_option("--weight", run.weight)->capture_default_str();
    run_cmd->add_option("--op-seed", run.op_seed)->capture_default_str();
    run_cmd->add_option("--rank-mode", run.rank_mode)->capture_default_str();
    run_cmd->add_option("--target-rank", run.target_rank, "stored rank (default: the suite's rank)");
    run_cmd->add_option("--ordering", run.ordering)->capture_default_str();
    run_cmd->add_option("--seeds", run.seeds, "ordering seeds")->delimiter(',');
    run_cmd->add_option("--out", run.out, "report directory");
    run_cmd->add_option("--store-dir", run.store_dir, "persist the final store(s) here");
    run_cmd->add_flag("--parallel", run.parallel, "run independent (K, seed) cells concurrently");
    run_cmd->add_flag("--timing", run.timing, "include wall-clock fields in reports");

    MergeArgs merge;
    auto* merge_cmd = app.add_subcommand("merge", "merge two adapter files with one operator");
    merge_cmd->add_option("inputs", merge.inputs)->required()->expected(2)->check(CLI::ExistingFile);
    merge_cmd->add_option("--op", merge.op)->capture_default_str();
    merge_cmd->add_option("--weight", merge.weight)->capture_default_str();
    merge_cmd->add_option("--density", merge.density)->capture_default_str();
    merge_cmd->add_option("--drop-rate", merge.drop_rate)->capture_default_str();
    merge_cmd->add_option("--seed", merge.seed)->capture_default_str();
    merge_cmd->add_option("--stored-count", merge.stored_count, "tasks already in the first input (running_average)")
        ->capture_default_str();
    merge_cmd->add_option("--rank-mode", merge.rank_mode)->capture_default_str();
    merge_cmd->add_option("--target-rank", merge.target_rank, "default: the inputs' rank");
    merge_cmd->add_option("--task-id", merge.task_id)->capture_default_str();
    merge_cmd->add_option("--out", merge.out)->required();
    merge_cmd->add_option("--report", merge.report, "JSON report path (default: stdout)");

    fs::path sim_dir;
    fs::path sim_csv;
    fs::path sim_pairs;
    auto* sim_cmd = app.add_subcommand("sim", "pairwise similarity matrix of a directory");
    sim_cmd->add_option("dir", sim_dir)->required()->check(CLI::ExistingDirectory);
    sim_cmd->add_option("--csv", sim_csv, "matrix CSV");
    sim_cmd->add_option("--pairs", sim_pairs, "one row per pair, with label agreement");

    fs::path route_store;
    std::optional<int> route_task;
    std::string route_task_id;
    auto* route_cmd = app.add_subcommand("route", "slot serving a task");
    route_cmd->add_option("--store", route_store)->required()->check(CLI::ExistingDirectory);
    auto* by_index = route_cmd->add_option("--task", route_task, "task index (arrival timestep)");
    auto* by_id = route_cmd->add_option("--task-id", route_task_id);
    by_index->excludes(by_id);
    by_id->excludes(by_index);
    route_cmd->callback([&] {
        if (!route_task && route_task_id.empty()) {
            throw CLI::RequiredError("--task or --task-id");
        }
    });

    fs::path inspect_store;
    fs::path inspect_adapter;
    std::string inspect_geometry;
    int inspect_rank = 32;
    auto* inspect_cmd = app.add_subcommand("inspect", "describe a store, an adapter file or a model geometry");
    auto* i_store = inspect_cmd->add_option("--store", inspect_store)->check(CLI::ExistingDirectory);
    auto* i_adapter = inspect_cmd->add_option("--adapter", inspect_adapter)->check(CLI::ExistingFile);
    auto* i_geometry = inspect_cmd->add_option("--geometry", inspect_geometry, "preset name")
                           ->check(CLI::IsMember(geometry_preset_names()));
    inspect_cmd->add_option("--rank", inspect_rank, "rank for --geometry")->capture_default_str();
    i_store->excludes(i_adapter)->excludes(i_geometry);
    i_adapter->excludes(i_geometry);
    inspect_cmd->callback([&] {
        if (inspect_store.empty() && inspect_adapter.empty() && inspect_geometry.empty()) {
            throw CLI::RequiredError("--store, --adapter or --geometry");
        }
    });

    GenArgs timing_gen;
    int t_min = 2;
    int t_max = 8;
    int t_repeats = 3;
    fs::path t_out;
    auto* timing_cmd = app.add_subcommand("timing", "integration time against 2..8 stored slots at full-scale shapes");
    timing_cmd->add_option("--min-slots", t_min)->capture_default_str();
    timing_cmd->add_option("--max-slots", t_max)->capture_default_str();
    timing_cmd->add_option("--repeats", t_repeats)->capture_default_str();
    timing_cmd->add_option("--seed", timing_gen.seed)->capture_default_str();
    timing_cmd->add_option("--out", t_out, "JSON output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen_cmd) return cmd_gen(gen, *gen_cmd);
        if (*calib_cmd) return cmd_calibrate(calib_dir, calib_json);
        if (*run_cmd) return cmd_run(run);
        if (*merge_cmd) return cmd_merge(merge);
        if (*sim_cmd) return cmd_sim(sim_dir, sim_csv, sim_pairs);
        if (*route_cmd) return cmd_route(route_store, route_task, route_task_id);
        if (*inspect_cmd) return cmd_inspect(inspect_store, inspect_adapter, inspect_geometry, inspect_rank);
        if (*timing_cmd) return cmd_timing(timing_gen, t_min, t_max, t_repeats, t_out);
    } catch (const Error& e) {
        std::cerr << "kmerge: " << e.what() << "\n";
        return e.code() == ErrorCode::ConfigError ? kExitUsage : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "kmerge: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
