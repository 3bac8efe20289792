// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "kmerge/config_json.hpp"
#include "kmerge/error.hpp"

namespace kmerge {

double surrogate_metric(const LoraAdapter& candidate, const LoraAdapter& single_task) {
    return std::max(0.0, adapter_similarity(candidate, single_task));
}

ScoreEntry aggregate_score(const ContinualMerger& merger, const Suite& suite, const std::vector<int>& order,
                           int seen) {
    ScoreEntry entry;
    if (seen <= 0) {
        return entry;
    }
    entry.ratios.reserve(static_cast<std::size_t>(seen));
    const AdapterStore store = merger.store();
    const MergeHistory history = merger.history();
    double sum = 0.0;
    for (int i = 0; i < seen; ++i) {
        const LoraAdapter& served = store.at(history.route(i + 1)).adapter;
        const double ratio = surrogate_metric(served, suite.adapters.at(static_cast<std::size_t>(order.at(i))));
        entry.ratios.push_back(ratio);
        sum += ratio;
    }
    entry.score = sum / seen;
    return entry;
}

double clustering_consistency(const std::vector<std::vector<std::string>>& clusters) {
    std::size_t matches = 0;
    std::size_t total = 0;
    for (const auto& cluster : clusters) {
        std::map<std::string, std::size_t> counts;
        std::size_t best = 0;
        for (const auto& label : cluster) {
            best = std::max(best, ++counts[label]);
        }
        matches += best;
        total += cluster.size();
    }
    return total == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(total);
}

double clustering_consistency(const MergeHistory& history, const std::vector<TaskSpec>& tasks,
                              const std::vector<int>& order) {
    std::vector<std::vector<std::string>> clusters;
    for (const auto& [_, timesteps] : history.entries()) {
        auto& cluster = clusters.emplace_back();
        for (int t : timesteps) {
            cluster.push_back(tasks.at(static_cast<std::size_t>(order.at(static_cast<std::size_t>(t - 1)))).problem_type);
        }
    }
    return clustering_consistency(clusters);
}

MergeHistory random_assignment_history(int task_count, int budget_k, std::uint64_t seed) {
    MergeHistory history;
    std::mt19937_64 rng(seed);
    std::vector<int> keys;
    for (int t = 1; t <= task_count; ++t) {
        if (static_cast<int>(keys.size()) < budget_k) {
            keys.push_back(history.allocate(t));
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, keys.size() - 1);
            history.append(keys[pick(rng)], t);
        }
    }
    return history;
}

SimulationRun run_simulation(const Suite& suite, const OrderingSpec& ordering, const PolicyConfig& config,
                             const SimulationOptions& options) {
    SimulationRun run;
    run.ordering = ordering;
    run.order = make_ordering(suite.tasks, ordering);
    ContinualMerger merger(config);
    for (std::size_t i = 0; i < run.order.size(); ++i) {
        const int idx = run.order[i];
        StepRecord step;
        step.decision = merger.ingest(suite.adapters.at(static_cast<std::size_t>(idx)));
        step.suite_index = idx;
        step.problem_type = suite.tasks.at(static_cast<std::size_t>(idx)).problem_type;
        if (options.score_each_step || i + 1 == run.order.size()) {
            step.score = aggregate_score(merger, suite, run.order, static_cast<int>(i + 1)).score;
        }
        run.steps.push_back(std::move(step));
    }
    if (!run.steps.empty()) {
        run.final_score = *run.steps.back().score;
    }
    run.history = merger.history();
    run.consistency = run.order.empty() ? 0.0 : clustering_consistency(run.history, suite.tasks, run.order);
    if (!options.store_dir.empty()) {
        merger.persist(options.store_dir);
    }
    return run;
}

SimulationReport summarize(const PolicyConfig& config, std::vector<SimulationRun> runs) {
    SimulationReport report;
    report.config = config;
    report.runs = std::move(runs);
    const double n = static_cast<double>(report.runs.size());
    if (report.runs.empty()) {
        return report;
    }
    double sum = 0.0;
    double cons = 0.0;
    for (const auto& r : report.runs) {
        sum += r.final_score;
        cons += r.consistency;
    }
    report.mean_final_score = sum / n;
    report.mean_consistency = cons / n;
    double var = 0.0;
    for (const auto& r : report.runs) {
        var += (r.final_score - report.mean_final_score) * (r.final_score - report.mean_final_score);
    }
    report.std_final_score = std::sqrt(var / n);
    return report;
}

SimulationReport run_simulations(const Suite& suite, const std::vector<OrderingSpec>& orderings,
                                 const PolicyConfig& config, const SimulationOptions& options) {
    std::vector<SimulationRun> runs;
    for (const auto& o : orderings) {
        runs.push_back(run_simulation(suite, o, config, options));
    }
    return summarize(config, std::move(runs));
}

namespace {

double elapsed_us(const IngestDecision& d) {
    return std::chrono::duration<double, std::micro>(d.elapsed).count();
}

} // namespace

nlohmann::json report_to_json(const SimulationReport& report, bool include_timing) {
    using nlohmann::json;
    json runs = json::array();
    std::size_t steps = 0;
    for (const auto& r : report.runs) {
        steps = std::max(steps, r.steps.size());
        json trajectory = json::array();
        for (const auto& s : r.steps) {
            json step = {{"timestep", s.decision.task_index},
                         {"task_id", s.decision.task_id},
                         {"problem_type", s.problem_type},
                         {"action", std::string(to_string(s.decision.action))},
                         {"slot_key", s.decision.slot_key},
                         {"similarity", s.decision.similarity ? json(*s.decision.similarity) : json(nullptr)},
                         {"occupied", s.decision.occupied_after},
                         {"S", s.score ? json(*s.score) : json(nullptr)}};
            if (include_timing) {
                step["elapsed_us"] = elapsed_us(s.decision);
            }
            trajectory.push_back(std::move(step));
        }
        json history = json::object();
        for (const auto& [key, tasks] : r.history.entries()) {
            history[std::to_string(key)] = tasks;
        }
        runs.push_back({{"ordering", std::string(to_string(r.ordering.kind))},
                        {"ordering_seed", r.ordering.seed},
                        {"order", r.order},
                        {"final_S", r.final_score},
                        {"clustering_consistency", r.consistency},
                        {"history", history},
                        {"steps", trajectory}});
    }
    // Per-timestep mean and population std of S across runs.
    json mean_s = json::array();
    json std_s = json::array();
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> v;
        for (const auto& r : report.runs) {
            if (t < r.steps.size() && r.steps[t].score) {
                v.push_back(*r.steps[t].score);
            }
        }
        if (v.empty()) {
            mean_s.push_back(nullptr);
            std_s.push_back(nullptr);
            continue;
        }
        double m = 0.0;
        for (double x : v) {
            m += x;
        }
        m /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) {
            var += (x - m) * (x - m);
        }
        mean_s.push_back(m);
        std_s.push_back(std::sqrt(var / static_cast<double>(v.size())));
    }
    return {{"schema_version", kReportSchemaVersion},
            {"policy", policy_to_json(report.config)},
            {"runs", runs},
            {"mean_final_S", report.mean_final_score},
            {"std_final_S", report.std_final_score},
            {"mean_clustering_consistency", report.mean_consistency},
            {"mean_S_by_timestep", mean_s},
            {"std_S_by_timestep", std_s}};
}

void write_trajectory_csv(const SimulationRun& run, const std::filesystem::path& path, bool include_timing) {
    std::ofstream out(path);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
    out << "timestep,S,occupied,action,similarity,elapsed_us\n";
    char buf[64];
    for (const auto& s : run.steps) {
        out << s.decision.task_index << ',';
        if (s.score) {
            std::snprintf(buf, sizeof(buf), "%.9f", *s.score);
            out << buf;
        }
        out << ',' << s.decision.occupied_after << ',' << to_string(s.decision.action) << ',';
        if (s.decision.similarity) {
            std::snprintf(buf, sizeof(buf), "%.9f", *s.decision.similarity);
            out << buf;
        }
        out << ',';
        if (include_timing) {
            std::snprintf(buf, sizeof(buf), "%.1f", elapsed_us(s.decision));
            out << buf;
        }
        out << '\n';
    }
}

std::vector<SweepRow> threshold_sweep(const Suite& suite, const PolicyConfig& config,
                                      const std::vector<double>& thresholds,
                                      const std::vector<OrderingSpec>& orderings) {
    if (config.variant != Variant::k_merge_pp) {
        throw Error(ErrorCode::ConfigError, "threshold sweep needs the k_merge_pp variant");
    }
    std::vector<SweepRow> rows;
    for (double s : thresholds) {
        PolicyConfig c = config;
        c.threshold_s = s;
        SimulationOptions options;
        options.score_each_step = false;
        const SimulationReport report = run_simulations(suite, orderings, c, options);
        rows.push_back({s, report.mean_final_score, report.std_final_score, report.mean_consistency});
    }
    return rows;
}

std::vector<TimingPoint> integration_timing(const std::vector<LoraAdapter>& pool, const PolicyConfig& base,
                                            int min_slots, int max_slots, int repeats) {
    if (min_slots < 1 || max_slots < min_slots || repeats < 1) {
        throw Error(ErrorCode::ConfigError, "invalid timing range");
    }
    if (pool.size() < static_cast<std::size_t>(max_slots + repeats)) {
        throw Error(ErrorCode::InsufficientData, "timing pool needs max_slots + repeats adapters");
    }
    std::vector<TimingPoint> out;
    for (int k = min_slots; k <= max_slots; ++k) {
        PolicyConfig config = base;
        config.budget_k = k;
        config.variant = Variant::k_merge;
        config.threshold_s.reset();
        TimingPoint point;
        point.stored_slots = k;
        // Each sample is the first merge into a freshly filled store, so the
        // slots' cluster sizes do not drift across repeats.
        for (int r = 0; r < repeats; ++r) {
            ContinualMerger merger(config);
            for (int i = 0; i < k; ++i) {
                merger.ingest(pool[static_cast<std::size_t>(i)]);
            }
            const IngestDecision d = merger.ingest(pool[static_cast<std::size_t>(k + r)]);
            point.samples.push_back(std::chrono::duration<double>(d.elapsed).count());
        }
        std::vector<double> sorted = point.samples;
        std::sort(sorted.begin(), sorted.end());
        point.seconds = sorted[sorted.size() / 2];
        out.push_back(std::move(point));
    }
    return out;
}

} // namespace kmerge
