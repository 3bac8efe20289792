// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Merge operators in dW space: the history-weighted running average used by
// the continual merger, and the pairwise baselines (linear, TIES, DARE,
// DARE-TIES). Rank control for storing a merge result lives in refactor.hpp.

#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "kmerge/delta.hpp"

namespace kmerge {

enum class MergeKind { running_average, linear, ties, dare, dare_ties };

std::string_view to_string(MergeKind kind);
MergeKind parse_merge_kind(std::string_view name);

struct MergeOperator {
    MergeKind kind = MergeKind::running_average;
    double density = 0.5;    // TIES keep fraction, in (0, 1]
    double drop_rate = 0.5;  // DARE drop probability, in [0, 1)
    double weight = 0.5;     // linear weight on the first input, in [0, 1]
    std::uint64_t seed = 0;

    /// Throws ConfigError.
    void validate() const;
};

/// (incoming + n * stored) / (n + 1), n = tasks already folded into `stored`.
MergedDelta running_average_merge(const DeltaSet& stored, int stored_count, const DeltaSet& incoming);
MergedDelta running_average_merge(const LoraAdapter& stored, int stored_count, const LoraAdapter& incoming);

/// weight * x + (1 - weight) * y
MergedDelta linear_merge(const DeltaSet& x, const DeltaSet& y, double weight = 0.5);
MergedDelta linear_merge(const LoraAdapter& x, const LoraAdapter& y, double weight = 0.5);

/// Trim / elect sign / disjoint mean, per layer tensor.
MergedDelta ties_merge(std::span<const DeltaSet> deltas, double density);

/// Single-tensor TIES kernel. Each input is trimmed to its top
/// ceil(density * size) magnitudes (earlier flattened index wins a tie at
/// the cutoff); the elected sign is the sign of the trimmed sum (+ on zero);
/// each entry is the mean over inputs whose trimmed value is nonzero and
/// carries the elected sign.
MatrixD ties_merge_tensor(std::span<const MatrixD> inputs, double density);

/// Counter-based uniform draw in [0, 1) keyed by (seed, layer, entry).
double dare_uniform(std::uint64_t seed, std::uint64_t layer_id, std::uint64_t entry);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

std::uint64_t layer_id(const LayerKey& key);

/// Drops each entry with probability drop_rate and rescales survivors by
/// 1 / (1 - drop_rate).
MatrixD dare_tensor(const MatrixD& delta, double drop_rate, std::uint64_t seed, std::uint64_t layer);
DeltaSet dare_preprocess(const DeltaSet& delta, double drop_rate, std::uint64_t seed);

/// Unary-weighted sum of the DARE-processed inputs. Input i draws its mask
/// from derive_seed(op.seed, i).
MergedDelta dare_merge(const DeltaSet& x, const DeltaSet& y, const MergeOperator& op);
MergedDelta dare_ties_merge(const DeltaSet& x, const DeltaSet& y, const MergeOperator& op);

/// Dispatches one pairwise merge step of the continual merger.
/// `stored_count` feeds the running average; baselines ignore it.
MergedDelta apply_merge(const MergeOperator& op, const DeltaSet& stored, int stored_count, const DeltaSet& incoming);

} // namespace kmerge
