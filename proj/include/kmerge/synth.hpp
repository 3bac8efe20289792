// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic adapter suites on an (problem type x language) task grid.
//
// Each task's per-layer update is
//   dW = type_strength * P_type + lang_strength * D_lang + noise_strength * E_task
// with unit-Frobenius-norm components. The components occupy disjoint blocks
// of the adapter's rank (type gets the largest block), so every adapter is
// exactly rank-r by construction and no truncation happens at generation.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmerge/adapter.hpp"

namespace kmerge {

struct ProjectionShape {
    int d_in = 64;
    int d_out = 64;
};

struct GeneratorConfig {
    int alpha_types = 5;
    int beta_langs = 8;
    int rank = 4;
    double scale_numerator = 16.0;
    int num_layers = 4;
    /// Indexed by Projection (key, query, value, output).
    std::array<ProjectionShape, 4> projections{};
    double type_strength = 1.0;
    double lang_strength = 0.5;
    double noise_strength = 0.3;
    std::uint64_t seed = 0;

    /// Throws ConfigError.
    void validate() const;

    /// 16 layers x 4 projections of width 2048, rank 32, scaling 128 / 32.
    static GeneratorConfig full_scale();
};

nlohmann::json generator_to_json(const GeneratorConfig& config);
GeneratorConfig generator_from_json(const nlohmann::json& j);

struct TaskSpec {
    int index = 0;  // position in the suite
    std::string task_id;
    std::string problem_type;
    std::string language;
};

struct Suite {
    std::vector<LoraAdapter> adapters;
    std::vector<TaskSpec> tasks;
    GeneratorConfig config;

    std::size_t size() const { return adapters.size(); }
};

/// Row-major over the grid: task i has type i / beta and language i % beta.
Suite generate_suite(const GeneratorConfig& config);

/// Threshold-calibration set with novel prototypes: two held-out problem
/// types over three held-out languages, the first type observed in all three
/// languages and the second in one. Same shapes and strengths as `config`.
Suite generate_calibration_suite(const GeneratorConfig& config, std::uint64_t seed);

enum class OrderingKind { random, problem_types, worst };

std::string_view to_string(OrderingKind kind);
OrderingKind parse_ordering(std::string_view name);

struct OrderingSpec {
    OrderingKind kind = OrderingKind::random;
    std::uint64_t seed = 0;
};

/// Arrival order as suite indices.
///   random         seeded uniform permutation
///   problem_types  sorted by (language, problem type): the first alpha
///                  arrivals cover every problem type once
///   worst          sorted by (problem type, language): same-type tasks
///                  arrive consecutively
std::vector<int> make_ordering(const std::vector<TaskSpec>& tasks, const OrderingSpec& spec);

/// `<task_id>.kmrg` per adapter plus tasks.json.
void write_suite(const Suite& suite, const std::filesystem::path& directory);
Suite read_suite(const std::filesystem::path& directory);

/// Every `.kmrg` in a directory, sorted by file name.
std::vector<LoraAdapter> read_adapter_directory(const std::filesystem::path& directory);

} // namespace kmerge
