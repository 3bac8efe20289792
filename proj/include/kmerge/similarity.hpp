// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kmerge/adapter.hpp"

namespace kmerge {

/// Flattened updates with norm below this carry no direction and score 0.
inline constexpr double kDegenerateNorm = 1e-12;

/// Cosine between the flattened dW slices of one (layer, projection).
double layer_similarity(const LoraAdapter& x, const LoraAdapter& y, const LayerKey& key);

/// ||dW||_F^2 per layer, in key order.
std::vector<double> layer_squared_norms(const LoraAdapter& x);

/// Unweighted mean of layer_similarity over every key. Throws
/// IncompatibleAdapters when the key sets differ.
double adapter_similarity(const LoraAdapter& x, const LoraAdapter& y);

struct SlotCandidate {
    int slot_key = 0;
    const LoraAdapter* adapter = nullptr;
    /// Optional cache of layer_squared_norms(*adapter).
    const std::vector<double>* squared_norms = nullptr;
};

struct SlotMatch {
    int slot_key = 0;
    double similarity = 0.0;
};

/// Argmax of adapter_similarity; ties go to the smallest slot key.
/// Throws EmptyStore when there are no candidates.
SlotMatch most_similar(const LoraAdapter& incoming, std::span<const SlotCandidate> candidates);

struct SimilarityMatrix {
    std::vector<std::string> adapter_ids;
    MatrixD values;
};

SimilarityMatrix similarity_matrix(std::span<const LoraAdapter> adapters);

/// Header row of ids, then one row per adapter, 6 decimals.
void write_similarity_csv(const SimilarityMatrix& matrix, const std::filesystem::path& path);

/// All n(n-1)/2 upper-triangle similarities, row by row.
std::vector<double> pairwise_similarities(std::span<const LoraAdapter> adapters);

/// Median pairwise similarity of a held-out set (mean of the middle two for
/// an even pair count). Throws InsufficientData for fewer than 2 adapters.
double calibrate_threshold(std::span<const LoraAdapter> held_out);

} // namespace kmerge
