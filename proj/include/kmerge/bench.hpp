// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Streaming simulation harness: replays a suite through the continual merger
// and scores every seen task against its own single-task adapter.

#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmerge/policy.hpp"
#include "kmerge/synth.hpp"

namespace kmerge {

/// Version of the JSON layout written by report_to_json.
inline constexpr int kReportSchemaVersion = 1;

/// max(0, similarity(candidate, single_task)). The single-task adapter scores
/// exactly 1 on its own task, so this is already the normalized ratio.
double surrogate_metric(const LoraAdapter& candidate, const LoraAdapter& single_task);

struct ScoreEntry {
    double score = 0.0;          // mean of ratios
    std::vector<double> ratios;  // one per seen task, in arrival order
};

/// Scores the first `seen` arrivals of `order` by routing each to its slot.
/// Timestep i + 1 corresponds to suite task order[i].
ScoreEntry aggregate_score(const ContinualMerger& merger, const Suite& suite, const std::vector<int>& order,
                           int seen);

/// Fraction of items matching their cluster's most common label.
double clustering_consistency(const std::vector<std::vector<std::string>>& clusters);

/// Clusters of problem types read off a merge history (timesteps map to
/// suite tasks through `order`).
double clustering_consistency(const MergeHistory& history, const std::vector<TaskSpec>& tasks,
                              const std::vector<int>& order);

/// Control: first K arrivals open slots, every later one joins a uniformly
/// random slot.
MergeHistory random_assignment_history(int task_count, int budget_k, std::uint64_t seed);

struct StepRecord {
    IngestDecision decision;
    int suite_index = 0;
    std::string problem_type;
    std::optional<double> score;  // S^(t) when step scoring is enabled
};

struct SimulationRun {
    OrderingSpec ordering;
    std::vector<int> order;
    std::vector<StepRecord> steps;
    double final_score = 0.0;
    double consistency = 0.0;
    MergeHistory history;
};

struct SimulationOptions {
    bool score_each_step = true;
    /// Persist the final store here when non-empty.
    std::filesystem::path store_dir;
};

SimulationRun run_simulation(const Suite& suite, const OrderingSpec& ordering, const PolicyConfig& config,
                             const SimulationOptions& options = {});

struct SimulationReport {
    PolicyConfig config;
    std::vector<SimulationRun> runs;
    double mean_final_score = 0.0;
    double std_final_score = 0.0;
    double mean_consistency = 0.0;
};

/// One run per ordering, aggregated (population std across runs).
SimulationReport run_simulations(const Suite& suite, const std::vector<OrderingSpec>& orderings,
                                 const PolicyConfig& config, const SimulationOptions& options = {});

SimulationReport summarize(const PolicyConfig& config, std::vector<SimulationRun> runs);

/// Full report. Timings are written only when `include_timing` is set, so
/// reports of identical runs compare byte for byte otherwise.
nlohmann::json report_to_json(const SimulationReport& report, bool include_timing);

/// Columns: timestep,S,occupied,action,similarity,elapsed_us.
void write_trajectory_csv(const SimulationRun& run, const std::filesystem::path& path, bool include_timing);

struct SweepRow {
    double threshold = 0.0;
    double mean_final_score = 0.0;
    double std_final_score = 0.0;
    double mean_consistency = 0.0;
};

/// One K-Merge++ simulation set per threshold value.
std::vector<SweepRow> threshold_sweep(const Suite& suite, const PolicyConfig& config,
                                      const std::vector<double>& thresholds,
                                      const std::vector<OrderingSpec>& orderings);

struct TimingPoint {
    int stored_slots = 0;
    double seconds = 0.0;  // median over repeats
    std::vector<double> samples;
};

/// Integration time of one incoming adapter against a full store of K slots,
/// for each K in [min_slots, max_slots]: pool[0..K) fill the store, then
/// pool[K + r] is timed against a freshly filled store for each repeat r. Uses K-Merge
/// with the given operator and rank policy. `pool` needs max_slots + repeats
/// adapters.
std::vector<TimingPoint> integration_timing(const std::vector<LoraAdapter>& pool, const PolicyConfig& base,
                                            int min_slots, int max_slots, int repeats);

} // namespace kmerge
